use serde::{Deserialize, Serialize};

use super::loss::{build_terms, BoundModel, PenaltySpec};
use super::{CgvaeModel, FdVariant, InputScaling, LossBreakdown, PenaltyKind, PenaltyScale};
use crate::error::{Error, Result};
use crate::numerics::tape::Tape;
use crate::numerics::{AdamWConfig, AdamWState, SeededRng, Tensor};
use crate::synthgen::DatasetBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the mask L1 term; ignored without a mask.
    pub gamma_mask: f64,
    pub epochs: usize,
    pub seed: u64,
    pub penalty_kind: PenaltyKind,
    /// Forces `α = 0` regardless of `alpha`.
    pub alpha_zero_ablation: bool,
    pub fd_step: f64,
    pub fd_variant: FdVariant,
    pub penalty_scale: PenaltyScale,
    /// Reparameterised noise draws per batch for the KL estimate.
    pub kl_samples: usize,
    pub weight_decay: f64,
    /// Learning rate at the last epoch as a fraction of `lr`, reached by
    /// cosine decay; `1` keeps the rate constant.
    pub lr_final_fraction: f64,
    /// Fit the model's input scaling to the training split before the
    /// first step.
    pub standardize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            batch: 64,
            alpha: 5e-2,
            beta: 1e-3,
            gamma_mask: 1e-2,
            epochs: 300,
            seed: 0,
            penalty_kind: PenaltyKind::L1,
            alpha_zero_ablation: false,
            fd_step: 1e-2,
            fd_variant: FdVariant::SummedColumns,
            penalty_scale: PenaltyScale::Standardized,
            kl_samples: 1,
            weight_decay: 1e-2,
            lr_final_fraction: 1.0,
            standardize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn effective_alpha(&self) -> f64 {
        if self.alpha_zero_ablation {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma_mask >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.batch == 0 || self.kl_samples == 0 {
            return bad("batch and kl_samples must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad("lr_final_fraction must lie in (0, 1]");
        }
        if self.penalty_kind == PenaltyKind::FiniteDiff && !(self.fd_step > 0.0) {
            return bad("finite-difference step must be positive");
        }
        Ok(())
    }

    /// Cosine schedule from `lr` down to `lr · lr_final_fraction`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let f = self.lr_final_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's mini-batches.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CgvaeModel,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch AdamW on the training split. A pure function of the model
/// initialisation, the dataset and `cfg`.
pub fn train(mut model: CgvaeModel, dataset: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.n_domains() == 0 || dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one domain and one row".into()));
    }
    if dataset.x.cols() != model.config.n_obs {
        return Err(Error::shape("train", dataset.x.shape(), &[dataset.len(), model.config.n_obs]));
    }
    if dataset.n_domains() > model.config.n_domains {
        return Err(Error::DomainOutOfRange {
            index: dataset.n_domains() - 1,
            count: model.config.n_domains,
        });
    }
    if cfg.standardize_inputs {
        model.scaling = InputScaling::fit(&dataset.train_x());
    }
    let names = model.param_names();
    let mut opt = AdamWState::new(cfg.optimizer(), model.params());
    let mut rng = SeededRng::new(cfg.seed);
    let mut order_rng = rng.fork(1);
    let mut noise_rng = rng.fork(2);
    let n = model.n_latent();
    let mut order = dataset.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        opt.config.lr = cfg.lr_at(epoch);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let x = dataset.x.select_rows(chunk);
            let u: Vec<usize> = chunk.iter().map(|&r| dataset.u[r]).collect();
            let etas = (0..cfg.kl_samples)
                .map(|_| Tensor::matrix(chunk.len(), n, noise_rng.normals(chunk.len() * n)))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_gradient(&model, &x, &u, &etas, cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            opt.step(&mut model.params_mut(), &grads, &names)?;
            sum.recon += loss.recon;
            sum.kl += loss.kl;
            sum.sparsity += loss.sparsity;
            sum.mask += loss.mask;
            batches += 1;
        }
        let k = batches as f64;
        let (alpha, gamma) = weights(&model, cfg);
        history.push(EpochRecord {
            epoch,
            loss: LossBreakdown::weighted(sum.recon / k, sum.kl / k, sum.sparsity / k, sum.mask / k, alpha, cfg.beta, gamma),
        });
    }
    Ok(TrainOutcome { model, history })
}

fn weights(model: &CgvaeModel, cfg: &TrainConfig) -> (f64, f64) {
    let gamma = if model.mask.is_some() { cfg.gamma_mask } else { 0.0 };
    (cfg.effective_alpha(), gamma)
}

/// Loss terms and the gradient of the minimised objective
/// `−L_r + α·L_s + β·L_KL (+ γ·L_m)` on one batch, averaged over the noise
/// draws in `etas`. Gradients follow [`CgvaeModel::params`] order. The
/// sparsity term is skipped when its weight is zero.
pub fn batch_gradient(
    model: &CgvaeModel,
    x: &Tensor,
    u: &[usize],
    etas: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if etas.is_empty() {
        return Err(Error::InvalidArgument("at least one noise draw is required".into()));
    }
    let (alpha, gamma) = weights(model, cfg);
    let penalty = (alpha > 0.0).then_some(PenaltySpec {
        kind: cfg.penalty_kind,
        fd_step: cfg.fd_step,
        fd_variant: cfg.fd_variant,
        scale: cfg.penalty_scale,
    });
    let mut tape = Tape::new();
    let bound = BoundModel::bind(model, &mut tape);
    let xv = tape.constant(model.scaling.apply(x)?);
    let s = etas.len() as f64;
    let mut objective = None;
    let mut parts = [0.0; 3];
    for eta in etas {
        let ev = tape.constant(eta.clone());
        let t = build_terms(&mut tape, model, &bound, xv, u, ev, penalty)?;
        let mut obj = tape.scale(t.recon, -1.0);
        let kl = tape.scale(t.kl, cfg.beta);
        obj = tape.add(obj, kl)?;
        parts[0] += tape.value(t.recon).item() / s;
        parts[1] += tape.value(t.kl).item() / s;
        if let Some(sp) = t.sparsity {
            parts[2] += tape.value(sp).item() / s;
            let w = tape.scale(sp, alpha);
            obj = tape.add(obj, w)?;
        }
        let obj = tape.scale(obj, 1.0 / s);
        objective = Some(match objective {
            None => obj,
            Some(acc) => tape.add(acc, obj)?,
        });
    }
    let mut objective = objective.expect("non-empty noise draws");
    let mut mask_l1 = 0.0;
    if let Some(m) = bound.mask {
        let a = tape.abs(m);
        let l1 = tape.sum(a);
        mask_l1 = tape.value(l1).item();
        let w = tape.scale(l1, gamma);
        objective = tape.add(objective, w)?;
    }
    let loss = LossBreakdown::weighted(parts[0], parts[1], parts[2], mask_l1, alpha, cfg.beta, gamma);
    if !tape.value(objective).item().is_finite() {
        return Ok((loss, Vec::new()));
    }
    let grads = tape.backward(objective)?;
    Ok((loss, bound.params().into_iter().map(|v| grads.wrt(v)).collect()))
}
