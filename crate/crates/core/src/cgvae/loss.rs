use serde::{Deserialize, Serialize};

use super::CgvaeModel;
use crate::error::{Error, Result};
use crate::flows::BoundFlow;
use crate::numerics::mlp::{BoundMlp, MlpTrace};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    L1,
    L2,
    FiniteDiff,
}

impl PenaltyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyKind::L1 => "l1",
            PenaltyKind::L2 => "l2",
            PenaltyKind::FiniteDiff => "finite_diff",
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" => Ok(PenaltyKind::L1),
            "l2" | "L2" => Ok(PenaltyKind::L2),
            "finite_diff" | "fd" => Ok(PenaltyKind::FiniteDiff),
            other => Err(Error::InvalidArgument(format!("unknown penalty kind `{other}`"))),
        }
    }
}

/// How the finite-difference estimator aggregates the difference quotients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdVariant {
    /// `‖Σ_i (G(z+ε_i) − G(z)) / step‖₁`: quotients summed over latents
    /// before the absolute value.
    #[default]
    SummedColumns,
    /// `Σ_i ‖(G(z+ε_i) − G(z)) / step‖₁`, the finite-difference analogue of
    /// the entrywise L1 penalty.
    Entrywise,
}

/// Loss terms of one evaluation, batch-averaged.
///
/// `total = recon − α·sparsity − β·kl − γ·mask` is the maximised quantity;
/// the trainer minimises [`LossBreakdown::objective`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `L_r = −mean ‖x − x̂‖²`
    pub recon: f64,
    /// `L_KL`, single-sample `log q − log p`
    pub kl: f64,
    /// `L_s`; zero when the penalty weight is zero and it was not evaluated
    pub sparsity: f64,
    /// `L_m = Σ|m_i|`
    pub mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(recon: f64, kl: f64, sparsity: f64, mask: f64, alpha: f64, beta: f64, gamma: f64) -> Self {
        LossBreakdown {
            recon,
            kl,
            sparsity,
            mask,
            total: recon - alpha * sparsity - beta * kl - gamma * mask,
        }
    }

    pub fn objective(&self) -> f64 {
        -self.total
    }
}

/// Posterior parameters and a reparameterised sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub mu: Tensor,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Tensor,
    /// `ẑ = μ + exp(logσ²/2) ⊙ η`
    pub z: Tensor,
}

/// Encodes `x`, given in observation units, with the supplied
/// standard-normal noise `η`.
pub fn encode(model: &CgvaeModel, x: &Tensor, eta: &Tensor) -> Result<Encoded> {
    let mut tape = Tape::new();
    let enc = model.encoder.bind_frozen(&mut tape, "encoder");
    let xv = tape.constant(model.scaling.apply(x)?);
    let ev = tape.constant(eta.clone());
    let p = encode_on_tape(&mut tape, &enc, xv, ev, model.n_latent())?;
    Ok(Encoded {
        mu: tape.value(p.mu).clone(),
        logvar: tape.value(p.logvar).clone(),
        z: tape.value(p.z).clone(),
    })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Posterior {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub eta: Var,
}

pub(crate) fn encode_on_tape(tape: &mut Tape, enc: &BoundMlp, x: Var, eta: Var, n: usize) -> Result<Posterior> {
    if !tape.value(x).all_finite() {
        return Err(Error::InvalidArgument("encoder input contains non-finite values".into()));
    }
    let h = enc.forward(tape, x)?;
    let mu = tape.slice_cols(h, 0, n)?;
    let raw = tape.slice_cols(h, n, n)?;
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eta)?;
    let z = tape.add(mu, noise)?;
    Ok(Posterior { mu, logvar, z, eta })
}

/// Model parameters registered on a tape, in [`CgvaeModel::params`] order.
pub(crate) struct BoundModel {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    pub flow: BoundFlow,
    pub mask: Option<Var>,
}

impl BoundModel {
    pub fn bind(model: &CgvaeModel, tape: &mut Tape) -> Self {
        BoundModel {
            encoder: model.encoder.bind(tape, "encoder"),
            decoder: model.decoder.bind(tape, "decoder"),
            flow: model.flow.bind(tape),
            mask: model.mask.as_ref().map(|m| tape.param(m.values.clone())),
        }
    }

    pub fn params(&self) -> Vec<Var> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.flow.params());
        p.extend(self.mask);
        p
    }
}

/// Units in which the decoder Jacobian is penalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    /// `∂x̂_i/∂ẑ_j` as is.
    Raw,
    /// `∂x̂_i/∂ẑ_j · sd_batch(ẑ_j)`, invariant to rescaling a latent.
    #[default]
    Standardized,
}

/// Penalty selection for one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PenaltySpec {
    pub kind: PenaltyKind,
    pub fd_step: f64,
    pub fd_variant: FdVariant,
    pub scale: PenaltyScale,
}

/// Batch standard deviation of each column, `[1, n]`, kept on the tape.
fn column_std(tape: &mut Tape, z: Var) -> Result<Var> {
    let b = tape.value(z).rows() as f64;
    let s = tape.sum_rows(z);
    let mean = tape.scale(s, 1.0 / b);
    let c = tape.sub(z, mean)?;
    let c2 = tape.square(c);
    let v = tape.sum_rows(c2);
    let v = tape.scale(v, 1.0 / b);
    let v = tape.clamp(v, 1e-24, f64::INFINITY);
    let lv = tape.log(v);
    let half = tape.scale(lv, 0.5);
    Ok(tape.exp(half))
}

/// Per-latent column weights for the penalty, `None` in raw units.
fn latent_scale(tape: &mut Tape, z: Var, scale: PenaltyScale) -> Result<Option<Var>> {
    match scale {
        PenaltyScale::Raw => Ok(None),
        PenaltyScale::Standardized if tape.value(z).rows() < 2 => Ok(None),
        PenaltyScale::Standardized => column_std(tape, z).map(Some),
    }
}

/// Tape handles for the batch-averaged terms of one noise draw.
pub(crate) struct Terms {
    pub recon: Var,
    pub kl: Var,
    pub sparsity: Option<Var>,
}

/// `log p(ẑ|u)` per row. Without a mask this is the flow prior. With a
/// mask `m` clamped to `[0, 1]` the prior transform interpolates between
/// the identity and the flow, `ε̂ = ẑ + m ⊙ (F_u(ẑ) − ẑ)`, so `m_i = 0`
/// leaves coordinate `i` domain-invariant.
pub(crate) fn prior_logdensity_on_tape(
    tape: &mut Tape,
    flow: &BoundFlow,
    mask: Option<Var>,
    z: Var,
    u: &[usize],
) -> Result<Var> {
    let out = flow.forward(tape, z, u)?;
    let (eps, logdet) = match mask {
        None => (out.eps, out.logdet_components),
        Some(m) => {
            let m = tape.clamp(m, 0.0, 1.0);
            let delta = tape.sub(out.eps, z)?;
            let shift = tape.mul(delta, m)?;
            let eps = tape.add(z, shift)?;
            // dε̂/dẑ = 1 − m + m·F'
            let fprime = tape.exp(out.logdet_components);
            let fm = tape.mul(fprime, m)?;
            let keep = tape.neg(m);
            let keep = tape.offset(keep, 1.0);
            let d = tape.add(fm, keep)?;
            let logdet = tape.log(d);
            (eps, logdet)
        }
    };
    let sq = tape.square(eps);
    let base = tape.scale(sq, -0.5);
    let base = tape.offset(base, -HALF_LN_2PI);
    let total = tape.add(base, logdet)?;
    Ok(tape.sum_cols(total))
}

pub(crate) fn build_terms(
    tape: &mut Tape,
    model: &CgvaeModel,
    bound: &BoundModel,
    x: Var,
    u: &[usize],
    eta: Var,
    penalty: Option<PenaltySpec>,
) -> Result<Terms> {
    let n = model.n_latent();
    let batch = tape.value(x).rows();
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let post = encode_on_tape(tape, &bound.encoder, x, eta, n)?;
    let trace = bound.decoder.trace(tape, post.z)?;

    let diff = tape.sub(x, trace.output)?;
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    let recon = tape.scale(sse, -1.0 / batch as f64);

    // log q(ẑ|x) = Σ_i [−½ log 2π − ½ logσ²_i − ½ η_i²]
    let e2 = tape.square(post.eta);
    let lq = tape.add(post.logvar, e2)?;
    let lq = tape.scale(lq, -0.5);
    let lq = tape.offset(lq, -HALF_LN_2PI);
    let lq = tape.sum_cols(lq);
    let lp = prior_logdensity_on_tape(tape, &bound.flow, bound.mask, post.z, u)?;
    let kl = tape.sub(lq, lp)?;
    let kl = tape.mean(kl);

    let sparsity = match penalty {
        None => None,
        Some(spec) => Some(penalty_on_tape(tape, &bound.decoder, &trace, post.z, spec)?),
    };
    Ok(Terms { recon, kl, sparsity })
}

fn penalty_on_tape(tape: &mut Tape, dec: &BoundMlp, trace: &MlpTrace, z: Var, spec: PenaltySpec) -> Result<Var> {
    let batch = tape.value(z).rows() as f64;
    match spec.kind {
        PenaltyKind::L1 | PenaltyKind::L2 => {
            let (b, n) = (tape.value(z).rows(), tape.value(z).cols());
            let mut jac = dec.jacobian(tape, trace, n)?;
            if let Some(sd) = latent_scale(tape, z, spec.scale)? {
                // row j·B + b of the Jacobian belongs to latent j
                let n_obs = tape.value(jac).cols();
                let mut block = Tensor::zeros(&[n * b, n]);
                for j in 0..n {
                    for r in 0..b {
                        block.set(j * b + r, j, 1.0);
                    }
                }
                let block = tape.constant(block);
                let rows = tape.mul(block, sd)?;
                let ones = tape.constant(Tensor::full(&[n, n_obs], 1.0));
                let weights = tape.matmul(rows, ones)?;
                jac = tape.mul(jac, weights)?;
            }
            let entries = if spec.kind == PenaltyKind::L1 {
                tape.abs(jac)
            } else {
                tape.square(jac)
            };
            let s = tape.sum(entries);
            Ok(tape.scale(s, 1.0 / batch))
        }
        PenaltyKind::FiniteDiff => {
            let sd = latent_scale(tape, z, spec.scale)?;
            fd_on_tape(tape, dec, z, spec.fd_step, spec.fd_variant, sd)
        }
    }
}

/// Forward differences with one batched decoder call over `(n + 1)·B` rows.
/// With `sd`, latent `j` moves by `step · sd_j` so each quotient estimates
/// the standardised Jacobian column.
fn fd_on_tape(tape: &mut Tape, dec: &BoundMlp, z: Var, step: f64, variant: FdVariant, sd: Option<Var>) -> Result<Var> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let (b, n) = (tape.value(z).rows(), tape.value(z).cols());
    let index: Vec<usize> = (0..=n).flat_map(|_| 0..b).collect();
    let stacked = tape.gather_rows(z, &index)?;
    let mut offsets = Tensor::zeros(&[(n + 1) * b, n]);
    for i in 0..n {
        for r in 0..b {
            offsets.set((i + 1) * b + r, i, step);
        }
    }
    let mut offsets = tape.constant(offsets);
    if let Some(sd) = sd {
        offsets = tape.mul(offsets, sd)?;
    }
    let shifted = tape.add(stacked, offsets)?;
    let g = dec.forward(tape, shifted)?;
    let base = tape.slice_rows(g, 0, b)?;
    let mut quotients = Vec::with_capacity(n);
    for i in 0..n {
        let gi = tape.slice_rows(g, (i + 1) * b, b)?;
        let d = tape.sub(gi, base)?;
        quotients.push(tape.scale(d, 1.0 / step));
    }
    let total = match variant {
        FdVariant::SummedColumns => {
            let mut acc = quotients[0];
            for &q in &quotients[1..] {
                acc = tape.add(acc, q)?;
            }
            let a = tape.abs(acc);
            tape.sum(a)
        }
        FdVariant::Entrywise => {
            let all = tape.concat(&quotients, 0)?;
            let a = tape.abs(all);
            tape.sum(a)
        }
    };
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Batch-averaged reconstruction and KL terms for the given noise, with the
/// reconstruction error measured in the model's scaled units. The
/// `total` is the plain ELBO `recon − kl`; the sparsity term is not
/// evaluated.
pub fn elbo_terms(model: &CgvaeModel, x: &Tensor, u: &[usize], eta: &Tensor) -> Result<LossBreakdown> {
    if x.rows() != u.len() {
        return Err(Error::shape("elbo_terms", x.shape(), &[u.len()]));
    }
    let mut tape = Tape::new();
    let bound = BoundModel::bind(model, &mut tape);
    let xv = tape.constant(model.scaling.apply(x)?);
    let ev = tape.constant(eta.clone());
    let t = build_terms(&mut tape, model, &bound, xv, u, ev, None)?;
    let mask = model.mask.as_ref().map_or(0.0, |m| m.l1());
    Ok(LossBreakdown::weighted(
        tape.value(t.recon).item(),
        tape.value(t.kl).item(),
        0.0,
        mask,
        0.0,
        1.0,
        0.0,
    ))
}

/// Batch-averaged `Σ_{i,j} |∂x̂_i/∂ẑ_j|` (or squared entries for `L2`) at
/// the rows of `z`. With [`PenaltyScale::Standardized`] column `j` is first
/// multiplied by the batch standard deviation of `ẑ_j`.
pub fn sparse_penalty_exact(model: &CgvaeModel, z: &Tensor, kind: PenaltyKind, scale: PenaltyScale) -> Result<f64> {
    if kind == PenaltyKind::FiniteDiff {
        return Err(Error::InvalidArgument("use sparse_penalty_fd for the finite-difference estimator".into()));
    }
    let mut tape = Tape::new();
    let dec = model.decoder.bind_frozen(&mut tape, "decoder");
    let zv = tape.constant(z.clone());
    let trace = dec.trace(&mut tape, zv)?;
    let spec = PenaltySpec {
        kind,
        fd_step: 0.0,
        fd_variant: FdVariant::default(),
        scale,
    };
    let s = penalty_on_tape(&mut tape, &dec, &trace, zv, spec)?;
    Ok(tape.value(s).item())
}

/// Forward finite-difference estimate of the sparsity penalty.
pub fn sparse_penalty_fd(
    model: &CgvaeModel,
    z: &Tensor,
    step: f64,
    variant: FdVariant,
    scale: PenaltyScale,
) -> Result<f64> {
    let mut tape = Tape::new();
    let dec = model.decoder.bind_frozen(&mut tape, "decoder");
    let zv = tape.constant(z.clone());
    let sd = latent_scale(&mut tape, zv, scale)?;
    let s = fd_on_tape(&mut tape, &dec, zv, step, variant, sd)?;
    Ok(tape.value(s).item())
}
