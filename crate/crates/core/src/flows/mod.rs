//! Domain-conditioned component-wise flows for the latent prior.
//!
//! [`DeepSigmoidFlow`] maps each latent coordinate through
//! `ε = σ⁻¹(Σ_k w_k σ(a_k z + b_k))` with per-domain parameter tables,
//! `a_k = softplus(raw_k) > 0` and `w = softmax(logits)`. Every coordinate
//! map is strictly increasing for any parameter values.

mod mask;

pub use mask::{masked_residual, masked_residual_on_tape, LatentMask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{sigmoid, softplus, Tape, Var};
use crate::numerics::{SeededRng, Tensor};

/// Inputs to σ⁻¹ are clamped to `[Y_EPS, 1 − Y_EPS]`.
pub const Y_EPS: f64 = 1e-7;
const DERIV_FLOOR: f64 = 1e-300;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub const INVERSE_TOL: f64 = 1e-8;
const MAX_DOUBLINGS: usize = 60;

/// Per-domain deep sigmoid flow. Tables are `[n_domains, n_latent * units]`
/// with column `i * units + k` holding unit `k` of latent `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepSigmoidFlow {
    pub n_domains: usize,
    pub n_latent: usize,
    pub units: usize,
    /// Pre-softplus slopes.
    pub raw_slope: Tensor,
    pub bias: Tensor,
    pub logits: Tensor,
}

/// Smallest-error `x` with `softplus(x) == 1.0` exactly.
fn softplus_preimage_of_one() -> f64 {
    let mut x = (std::f64::consts::E - 1.0).ln();
    for _ in 0..64 {
        let y = softplus(x);
        if y == 1.0 {
            break;
        }
        x = if y > 1.0 { x.next_down() } else { x.next_up() };
    }
    x
}

impl DeepSigmoidFlow {
    /// Near-identity initialisation: slopes ≈ 1, biases spread over
    /// `[-2, 2]`, uniform mixture weights, plus small seeded jitter.
    pub fn new(n_domains: usize, n_latent: usize, units: usize, rng: &mut SeededRng) -> Self {
        let cols = n_latent * units;
        let one = softplus_preimage_of_one();
        let mut raw = Vec::with_capacity(n_domains * cols);
        let mut bias = Vec::with_capacity(n_domains * cols);
        let mut logits = Vec::with_capacity(n_domains * cols);
        for _ in 0..n_domains {
            for _ in 0..n_latent {
                for k in 0..units {
                    let spread = if units > 1 {
                        -2.0 + 4.0 * k as f64 / (units - 1) as f64
                    } else {
                        0.0
                    };
                    raw.push(one + 0.1 * rng.normal());
                    bias.push(spread + 0.1 * rng.normal());
                    logits.push(0.1 * rng.normal());
                }
            }
        }
        DeepSigmoidFlow {
            n_domains,
            n_latent,
            units,
            raw_slope: Tensor::matrix(n_domains, cols, raw).expect("shape"),
            bias: Tensor::matrix(n_domains, cols, bias).expect("shape"),
            logits: Tensor::matrix(n_domains, cols, logits).expect("shape"),
        }
    }

    /// One unit per latent with `w = 1, a = 1, b = 0`: the identity map.
    pub fn identity(n_domains: usize, n_latent: usize) -> Self {
        DeepSigmoidFlow {
            n_domains,
            n_latent,
            units: 1,
            raw_slope: Tensor::full(&[n_domains, n_latent], softplus_preimage_of_one()),
            bias: Tensor::zeros(&[n_domains, n_latent]),
            logits: Tensor::zeros(&[n_domains, n_latent]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.raw_slope, &self.bias, &self.logits]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.raw_slope, &mut self.bias, &mut self.logits]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        ["raw_slope", "bias", "logits"]
            .iter()
            .map(|n| format!("{prefix}.{n}"))
            .collect()
    }

    fn check_domains(&self, u: &[usize]) -> Result<()> {
        match u.iter().find(|&&d| d >= self.n_domains) {
            Some(&index) => Err(Error::DomainOutOfRange {
                index,
                count: self.n_domains,
            }),
            None => Ok(()),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFlow {
        BoundFlow {
            raw_slope: tape.param(self.raw_slope.clone()),
            bias: tape.param(self.bias.clone()),
            logits: tape.param(self.logits.clone()),
            n_domains: self.n_domains,
            n_latent: self.n_latent,
            units: self.units,
        }
    }

    /// `(a_k, b_k, w_k)` of latent `i` in domain `u`.
    pub fn units_of(&self, u: usize, i: usize) -> Vec<(f64, f64, f64)> {
        let k0 = i * self.units;
        let logits = &self.logits.row(u)[k0..k0 + self.units];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        (0..self.units)
            .map(|k| {
                (
                    softplus(self.raw_slope.get(u, k0 + k)),
                    self.bias.get(u, k0 + k),
                    e[k] / total,
                )
            })
            .collect()
    }

    /// Scalar map `ε_i(z)` and its derivative for one coordinate.
    pub fn component(&self, u: usize, i: usize, z: f64) -> (f64, f64) {
        let mut y = 0.0;
        let mut dy = 0.0;
        for (a, b, w) in self.units_of(u, i) {
            let s = sigmoid(a * z + b);
            y += w * s;
            dy += w * a * s * (1.0 - s);
        }
        let yc = y.clamp(Y_EPS, 1.0 - Y_EPS);
        let eps = yc.ln() - (1.0 - yc).ln();
        (eps, dy.max(DERIV_FLOOR) / (yc * (1.0 - yc)))
    }

    /// `(ε̂, logdet)` for a batch, evaluated off-tape.
    pub fn forward(&self, z: &Tensor, u: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let out = bound.forward(&mut tape, zv, u)?;
        let logdet = tape.sum_cols(out.logdet_components);
        Ok((tape.value(out.eps).clone(), tape.value(logdet).data().to_vec()))
    }

    /// `log p(ẑ | u) = log N(ε̂; 0, I) + logdet`, per row.
    pub fn prior_logdensity(&self, z: &Tensor, u: &[usize]) -> Result<Vec<f64>> {
        let (eps, logdet) = self.forward(z, u)?;
        let n = eps.cols();
        Ok((0..eps.rows())
            .map(|r| {
                let base: f64 = eps.row(r).iter().map(|e| -HALF_LN_2PI - 0.5 * e * e).sum();
                debug_assert_eq!(eps.row(r).len(), n);
                base + logdet[r]
            })
            .collect())
    }

    /// Componentwise bisection inverse of [`forward`](Self::forward).
    pub fn inverse(&self, eps: &Tensor, u: &[usize]) -> Result<Tensor> {
        self.check_domains(u)?;
        if eps.cols() != self.n_latent || eps.rows() != u.len() {
            return Err(Error::shape("flow_inverse", eps.shape(), &[u.len(), self.n_latent]));
        }
        let mut out = Tensor::zeros(eps.shape());
        for r in 0..eps.rows() {
            for i in 0..self.n_latent {
                let z = self.invert_component(u[r], i, eps.get(r, i))?;
                out.set(r, i, z);
            }
        }
        Ok(out)
    }

    fn invert_component(&self, u: usize, i: usize, target: f64) -> Result<f64> {
        let f = |z: f64| self.component(u, i, z).0 - target;
        let (mut lo, mut hi) = (-10.0, 10.0);
        let mut doublings = 0;
        while f(lo) > 0.0 || f(hi) < 0.0 {
            if doublings == MAX_DOUBLINGS {
                return Err(Error::BracketExpansion { target, doublings });
            }
            lo *= 2.0;
            hi *= 2.0;
            doublings += 1;
        }
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let v = f(mid);
            if v.abs() < INVERSE_TOL * 1e-4 || mid == lo || mid == hi {
                break;
            }
            if v < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(mid)
    }
}

/// Flow parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundFlow {
    pub raw_slope: Var,
    pub bias: Var,
    pub logits: Var,
    n_domains: usize,
    n_latent: usize,
    units: usize,
}

/// Tape output of a flow evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FlowOutput {
    /// `[batch, n_latent]`
    pub eps: Var,
    /// `log ∂ε̂_i/∂ẑ_i`, `[batch, n_latent]`
    pub logdet_components: Var,
}

impl BoundFlow {
    pub fn params(&self) -> Vec<Var> {
        vec![self.raw_slope, self.bias, self.logits]
    }

    /// `[n, n*K]` block matrix repeating each latent over its units.
    fn expand(&self) -> Tensor {
        let (n, k) = (self.n_latent, self.units);
        let mut t = Tensor::zeros(&[n, n * k]);
        for i in 0..n {
            for j in 0..k {
                t.set(i, i * k + j, 1.0);
            }
        }
        t
    }

    pub fn forward(&self, tape: &mut Tape, z: Var, u: &[usize]) -> Result<FlowOutput> {
        if let Some(&index) = u.iter().find(|&&d| d >= self.n_domains) {
            return Err(Error::DomainOutOfRange {
                index,
                count: self.n_domains,
            });
        }
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.n_latent || zs[0] != u.len() {
            return Err(Error::shape("flow_forward", &zs, &[u.len(), self.n_latent]));
        }
        let expand = self.expand();
        let gather_t = expand.transpose();
        let expand = tape.constant(expand);
        let gather = tape.constant(gather_t);

        let raw = tape.gather_rows(self.raw_slope, u)?;
        let a = tape.softplus(raw);
        let b = tape.gather_rows(self.bias, u)?;
        let logits = tape.gather_rows(self.logits, u)?;

        // softmax within each latent's group of units
        let shift = {
            let lv = tape.value(logits);
            let k = self.units;
            let mut m = lv.clone();
            for r in 0..lv.rows() {
                for g in 0..self.n_latent {
                    let row = &lv.row(r)[g * k..(g + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for j in 0..k {
                        m.set(r, g * k + j, max);
                    }
                }
            }
            tape.constant(m)
        };
        let centered = tape.sub(logits, shift)?;
        let e = tape.exp(centered);
        let group = tape.matmul(e, gather)?;
        let group = tape.matmul(group, expand)?;
        let w = tape.div(e, group)?;

        let zx = tape.matmul(z, expand)?;
        let pre = tape.mul(a, zx)?;
        let pre = tape.add(pre, b)?;
        let s = tape.sigmoid(pre);

        let ws = tape.mul(w, s)?;
        let y = tape.matmul(ws, gather)?;
        let y = tape.clamp(y, Y_EPS, 1.0 - Y_EPS);
        let one_minus_y = tape.neg(y);
        let one_minus_y = tape.offset(one_minus_y, 1.0);
        let log_y = tape.log(y);
        let log_1my = tape.log(one_minus_y);
        let eps = tape.sub(log_y, log_1my)?;

        // dy/dz = Σ_k w_k a_k s_k (1 − s_k)
        let one_minus_s = tape.neg(s);
        let one_minus_s = tape.offset(one_minus_s, 1.0);
        let ds = tape.mul(s, one_minus_s)?;
        let ds = tape.mul(ds, a)?;
        let ds = tape.mul(ds, w)?;
        let dy = tape.matmul(ds, gather)?;
        let dy = tape.clamp(dy, DERIV_FLOOR, f64::INFINITY);
        // dε/dz = y' / (y (1 − y)); a single ratio keeps the identity case exact
        let den = tape.mul(y, one_minus_y)?;
        let ratio = tape.div(dy, den)?;
        let logdet = tape.log(ratio);

        Ok(FlowOutput {
            eps,
            logdet_components: logdet,
        })
    }

    /// Per-row `log p(ẑ|u)` as a `[batch, 1]` tape value.
    pub fn prior_logdensity(&self, tape: &mut Tape, z: Var, u: &[usize]) -> Result<Var> {
        let out = self.forward(tape, z, u)?;
        standard_normal_logdensity_plus(tape, out.eps, out.logdet_components)
    }
}

/// `Σ_i [log N(ε_i; 0, 1) + logdet_i]` per row, `[batch, 1]`.
pub(crate) fn standard_normal_logdensity_plus(tape: &mut Tape, eps: Var, logdet: Var) -> Result<Var> {
    let sq = tape.square(eps);
    let base = tape.scale(sq, -0.5);
    let base = tape.offset(base, -HALF_LN_2PI);
    let total = tape.add(base, logdet)?;
    Ok(tape.sum_cols(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::central_gradient;

    fn random_flow(seed: u64) -> DeepSigmoidFlow {
        let mut rng = SeededRng::new(seed);
        let mut f = DeepSigmoidFlow::new(3, 2, 4, &mut rng);
        for v in f.raw_slope.data_mut() {
            *v = rng.uniform_in(0.0, 1.5);
        }
        for v in f.bias.data_mut() {
            *v = rng.uniform_in(-1.0, 1.0);
        }
        for v in f.logits.data_mut() {
            *v = rng.normal();
        }
        f
    }

    #[test]
    fn identity_flow_is_identity_with_zero_logdet() {
        let f = DeepSigmoidFlow::identity(2, 3);
        let z = Tensor::matrix(2, 3, vec![-1.5, 0.0, 0.3, 2.0, -0.1, 4.0]).unwrap();
        let (eps, logdet) = f.forward(&z, &[0, 1]).unwrap();
        assert!(eps.max_abs_diff(&z) < 1e-12);
        assert!(logdet.iter().all(|&l| l == 0.0), "{logdet:?}");
    }

    #[test]
    fn identity_flow_density_at_origin() {
        let f = DeepSigmoidFlow::identity(1, 4);
        let lp = f.prior_logdensity(&Tensor::zeros(&[1, 4]), &[0]).unwrap();
        let expected = 4.0 * (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lp[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn strictly_increasing() {
        let f = random_flow(3);
        for u in 0..3 {
            for i in 0..2 {
                let mut prev = f64::NEG_INFINITY;
                for s in -40..=40 {
                    let (e, _) = f.component(u, i, s as f64 * 0.2);
                    assert!(e > prev, "u{u} i{i} at {}", s as f64 * 0.2);
                    prev = e;
                }
            }
        }
    }

    #[test]
    fn logdet_matches_finite_differences() {
        let f = random_flow(8);
        let mut rng = SeededRng::new(1);
        for _ in 0..20 {
            let u = rng.below(3);
            let z = Tensor::matrix(1, 2, vec![rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0)]).unwrap();
            let (_, logdet) = f.forward(&z, &[u]).unwrap();
            let fd: f64 = (0..2)
                .map(|i| {
                    let d = central_gradient(|x| f.component(u, i, x[0]).0, &[z.get(0, i)], 1e-5)[0];
                    d.ln()
                })
                .sum();
            assert!((logdet[0] - fd).abs() < 1e-4);
        }
    }

    #[test]
    fn domain_out_of_range() {
        let f = DeepSigmoidFlow::identity(2, 1);
        let z = Tensor::zeros(&[1, 1]);
        assert!(matches!(f.forward(&z, &[2]), Err(Error::DomainOutOfRange { index: 2, count: 2 })));
        assert!(f.inverse(&z, &[5]).is_err());
    }

    #[test]
    fn inverse_round_trips() {
        let f = random_flow(4);
        let mut rng = SeededRng::new(9);
        let z = Tensor::matrix(10, 2, (0..20).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).unwrap();
        let u: Vec<usize> = (0..10).map(|r| r % 3).collect();
        let (eps, _) = f.forward(&z, &u).unwrap();
        let back = f.inverse(&eps, &u).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-6);
        let (again, _) = f.forward(&back, &u).unwrap();
        assert!(again.max_abs_diff(&eps) < 1e-6);
    }

    #[test]
    fn identity_inverse_is_identity() {
        let f = DeepSigmoidFlow::identity(1, 2);
        let e = Tensor::matrix(1, 2, vec![0.7, -1.2]).unwrap();
        assert!(f.inverse(&e, &[0]).unwrap().max_abs_diff(&e) < 1e-8);
    }

    #[test]
    fn unreachable_target_fails_bracket() {
        let f = DeepSigmoidFlow::identity(1, 1);
        // |ε| is capped near 16.1 by the σ⁻¹ clamp
        let e = Tensor::matrix(1, 1, vec![50.0]).unwrap();
        assert!(matches!(f.inverse(&e, &[0]), Err(Error::BracketExpansion { .. })));
    }
}
