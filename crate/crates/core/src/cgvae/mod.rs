//! Conditional-flow-prior VAE with a sparse-mixing Jacobian penalty.
//!
//! The trainer minimises `−L_r + α·L_s + β·L_KL (+ γ·L_m)`:
//! reconstruction error, decoder Jacobian sparsity, and the single-sample
//! KL between the Gaussian posterior and the domain-conditioned flow prior.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use loss::{
    elbo_terms, encode, sparse_penalty_exact, sparse_penalty_fd, Encoded, FdVariant, LossBreakdown,
    PenaltyKind, PenaltyScale, LOGVAR_MAX, LOGVAR_MIN,
};
pub use train::{batch_gradient, train, EpochRecord, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{DeepSigmoidFlow, LatentMask};
use crate::numerics::{Mlp, SeededRng, Tape, Tensor, Var, DEFAULT_SLOPE};

/// Architecture of a [`CgvaeModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_obs: usize,
    pub n_latent: usize,
    pub n_domains: usize,
    pub hidden: usize,
    /// Linear layers per MLP.
    pub layers: usize,
    pub flow_units: usize,
    pub slope: f64,
    pub use_mask: bool,
}

impl ModelConfig {
    pub fn new(n_obs: usize, n_latent: usize, n_domains: usize) -> Self {
        ModelConfig {
            n_obs,
            n_latent,
            n_domains,
            hidden: 64,
            layers: 5,
            flow_units: 8,
            slope: DEFAULT_SLOPE,
            use_mask: false,
        }
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat(self.hidden).take(self.layers - 1));
        s.push(output);
        s
    }
}

/// Per-coordinate affine map from observation units to the units the
/// networks see, `x' = (x − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(n: usize) -> Self {
        InputScaling {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Column means and population standard deviations of `x`; constant
    /// columns keep unit scale.
    pub fn fit(x: &Tensor) -> Self {
        let rows = x.rows().max(1) as f64;
        let (mut shift, mut scale) = (Vec::new(), Vec::new());
        for j in 0..x.cols() {
            let c = x.column(j);
            let m = c.iter().sum::<f64>() / rows;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rows).sqrt();
            shift.push(m);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        InputScaling { shift, scale }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.shift.len() {
            return Err(Error::shape("observations", x.shape(), &[x.rows(), self.shift.len()]));
        }
        Ok(())
    }

    /// Observation units to network units.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        let n = self.shift.len();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % n;
            *v = (*v - self.shift[j]) / self.scale[j];
        }
        Ok(out)
    }

    /// Network units back to observation units.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        let n = self.shift.len();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % n;
            *v = *v * self.scale[j] + self.shift[j];
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgvaeModel {
    pub config: ModelConfig,
    /// `x → (μ, logσ²)`, output width `2 n_latent`.
    pub encoder: Mlp,
    /// `ẑ → x̂`.
    pub decoder: Mlp,
    pub flow: DeepSigmoidFlow,
    pub mask: Option<LatentMask>,
    /// Fitted on the training split; not a trainable parameter.
    pub scaling: InputScaling,
}

impl CgvaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.n_latent == 0 || config.n_domains == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model config {config:?}")));
        }
        let mut rng = SeededRng::new(seed);
        let encoder = Mlp::new(&config.sizes(config.n_obs, 2 * config.n_latent), config.slope, &mut rng);
        let decoder = Mlp::new(&config.sizes(config.n_latent, config.n_obs), config.slope, &mut rng);
        let flow = DeepSigmoidFlow::new(config.n_domains, config.n_latent, config.flow_units, &mut rng);
        let mask = config
            .use_mask
            .then(|| LatentMask::new(vec![0.5; config.n_latent]));
        let scaling = InputScaling::identity(config.n_obs);
        Ok(CgvaeModel {
            config,
            encoder,
            decoder,
            flow,
            mask,
            scaling,
        })
    }

    /// Assembles a model from explicit parts, checking that they agree.
    pub fn from_parts(encoder: Mlp, decoder: Mlp, flow: DeepSigmoidFlow, mask: Option<LatentMask>) -> Result<Self> {
        let n_latent = decoder.input_dim();
        if encoder.output_dim() != 2 * n_latent {
            return Err(Error::shape("encoder output", &[encoder.output_dim()], &[2 * n_latent]));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(Error::shape("decoder output", &[decoder.output_dim()], &[encoder.input_dim()]));
        }
        if flow.n_latent != n_latent || mask.as_ref().is_some_and(|m| m.len() != n_latent) {
            return Err(Error::shape("flow", &[flow.n_latent], &[n_latent]));
        }
        let config = ModelConfig {
            n_obs: decoder.output_dim(),
            n_latent,
            n_domains: flow.n_domains,
            hidden: encoder.layers.first().map_or(0, |l| l.fan_out()),
            layers: encoder.layers.len(),
            flow_units: flow.units,
            slope: decoder.slope,
            use_mask: mask.is_some(),
        };
        let scaling = InputScaling::identity(config.n_obs);
        Ok(CgvaeModel {
            config,
            encoder,
            decoder,
            flow,
            mask,
            scaling,
        })
    }

    pub fn n_latent(&self) -> usize {
        self.config.n_latent
    }

    /// All trainable tensors in checkpoint order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.flow.params());
        if let Some(m) = &self.mask {
            p.push(&m.values);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.flow.params_mut());
        if let Some(m) = &mut self.mask {
            p.push(&mut m.values);
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names("encoder");
        n.extend(self.decoder.param_names("decoder"));
        n.extend(self.flow.param_names("flow"));
        if self.mask.is_some() {
            n.push("mask".into());
        }
        n
    }

    /// Posterior means `μ(x)`, used as the latent estimate for evaluation.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.encoder.apply(&self.scaling.apply(x)?)?;
        let n = self.n_latent();
        let mut mu = Tensor::zeros(&[h.rows(), n]);
        for r in 0..h.rows() {
            for i in 0..n {
                mu.set(r, i, h.get(r, i));
            }
        }
        Ok(mu)
    }

    /// Reconstruction in observation units.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.scaling.invert(&self.decoder.apply(z)?)
    }

    /// [`CgvaeModel::decode`] recorded on `tape` with frozen weights.
    pub fn decode_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let out = self.decoder.bind_frozen(tape, "decoder").forward(tape, z)?;
        let rows = tape.value(out).rows();
        let n = self.scaling.scale.len();
        let tile = |v: &[f64]| Tensor::matrix(rows, n, v.iter().copied().cycle().take(rows * n).collect());
        let scale = tape.constant(tile(&self.scaling.scale)?);
        let shift = tape.constant(tile(&self.scaling.shift)?);
        let scaled = tape.mul(out, scale)?;
        tape.add(scaled, shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_splits_into_two_halves() {
        let m = CgvaeModel::new(ModelConfig::new(4, 4, 2), 0).unwrap();
        assert_eq!(m.encoder.output_dim(), 8);
        assert_eq!(m.decoder.input_dim(), 4);
        assert_eq!(m.decoder.output_dim(), 4);
        assert_eq!(m.encoder.layers.len(), 5);
        assert_eq!(m.params().len(), m.param_names().len());
    }

    #[test]
    fn mask_adds_a_parameter() {
        let mut cfg = ModelConfig::new(3, 3, 2);
        cfg.use_mask = true;
        let m = CgvaeModel::new(cfg, 1).unwrap();
        assert_eq!(m.param_names().last().unwrap(), "mask");
    }
}
