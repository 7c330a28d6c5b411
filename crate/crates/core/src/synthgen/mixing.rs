use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tape::{leaky_relu, Tape, Var};
use crate::numerics::{SeededRng, Tensor, DEFAULT_SLOPE};
use crate::synthgen::graph::MixingGraph;

const MAX_ATTEMPTS: usize = 100;
const MIN_ABS_DET: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e3;
/// Reference draws used to calibrate the per-layer condition threshold.
const REFERENCE_DRAWS: usize = 1000;
/// Accepted layers must be at least as well conditioned as this quantile
/// of the reference draws.
const CONDITION_QUANTILE: f64 = 0.25;

/// One square layer `h' = LeakyReLU(h W + b)`. `weight[i][j]` maps input
/// `i` to output `j` and is exactly zero wherever `mask[i][j]` is false.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingLayer {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub mask: Vec<Vec<bool>>,
}

/// Ground-truth invertible mixer `x = g(z)`.
///
/// The first layer carries the graph's sparsity pattern; deeper layers are
/// diagonal, so the composed Jacobian support is exactly the adjacency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    pub graph: MixingGraph,
    pub layers: Vec<MixingLayer>,
    pub slope: f64,
    pub seed: u64,
}

fn layer_mask(graph: &MixingGraph, depth_index: usize) -> Vec<Vec<bool>> {
    let n = graph.n_latent();
    if depth_index == 0 {
        graph.adjacency().to_vec()
    } else {
        (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect()
    }
}

fn draw_masked(mask: &[Vec<bool>], rng: &mut SeededRng) -> Tensor {
    let n = mask.len();
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if mask[i][j] {
                let mag = rng.uniform_in(0.5, 1.5);
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                w.set(i, j, sign * mag);
            }
        }
    }
    w
}

/// Condition-number threshold for a layer pattern: the
/// [`CONDITION_QUANTILE`] quantile over reference draws, capped at
/// [`MAX_CONDITION`].
fn condition_threshold(mask: &[Vec<bool>], rng: &mut SeededRng) -> f64 {
    let mut conds: Vec<f64> = (0..REFERENCE_DRAWS)
        .map(|_| det_and_condition(&draw_masked(mask, rng)).1)
        .filter(|c| c.is_finite())
        .collect();
    if conds.is_empty() {
        return MAX_CONDITION;
    }
    conds.sort_by(f64::total_cmp);
    let idx = ((conds.len() - 1) as f64 * CONDITION_QUANTILE).round() as usize;
    conds[idx].min(MAX_CONDITION)
}

fn det_and_condition(w: &Tensor) -> (f64, f64) {
    let n = w.rows();
    let m = DMatrix::from_row_slice(n, n, w.data());
    let det = m.determinant();
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    (det, if min > 0.0 { max / min } else { f64::INFINITY })
}

impl MixingSpec {
    /// Draws masked weights from the seeded source, resampling each layer
    /// until `|det| > 1e-6` and its condition number is within the best
    /// quarter of draws with the same sparsity pattern (and at most 1e3).
    pub fn build(graph: MixingGraph, depth: usize, seed: u64) -> Result<Self> {
        MixingSpec::build_with_slope(graph, depth, seed, DEFAULT_SLOPE)
    }

    pub fn build_with_slope(graph: MixingGraph, depth: usize, seed: u64, slope: f64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("mixing depth must be at least 1".into()));
        }
        if graph.n_latent() != graph.n_obs() {
            return Err(Error::InvalidArgument(format!(
                "invertible mixing needs n_latent == n_obs, got {} and {}",
                graph.n_latent(),
                graph.n_obs()
            )));
        }
        if !(slope > 0.0) {
            return Err(Error::InvalidArgument("LeakyReLU slope must be positive".into()));
        }
        let n = graph.n_latent();
        let mut rng = SeededRng::new(seed);
        let mut layers = Vec::with_capacity(depth);
        for d in 0..depth {
            let mask = layer_mask(&graph, d);
            let threshold = condition_threshold(&mask, &mut rng.fork(0xc0d0 + d as u64));
            let mut last = (0.0, f64::INFINITY);
            let mut accepted = None;
            for _ in 0..MAX_ATTEMPTS {
                let w = draw_masked(&mask, &mut rng);
                last = det_and_condition(&w);
                if last.0.abs() > MIN_ABS_DET && last.1 <= threshold {
                    accepted = Some(w);
                    break;
                }
            }
            let weight = accepted.ok_or(Error::Conditioning {
                attempts: MAX_ATTEMPTS,
                last_det: last.0,
                last_cond: last.1,
            })?;
            let bias = (0..n).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
            layers.push(MixingLayer { weight, bias, mask });
        }
        Ok(MixingSpec {
            graph,
            layers,
            slope,
            seed,
        })
    }

    /// Spec with caller-provided weights; masks are taken from the graph and
    /// weights outside the mask are rejected.
    pub fn from_weights(graph: MixingGraph, weights: Vec<Tensor>, biases: Vec<Vec<f64>>, slope: f64) -> Result<Self> {
        let n = graph.n_latent();
        if weights.len() != biases.len() || weights.is_empty() {
            return Err(Error::InvalidArgument("need one bias per weight matrix".into()));
        }
        let mut layers = Vec::new();
        for (d, (weight, bias)) in weights.into_iter().zip(biases).enumerate() {
            if weight.shape() != [n, n] || bias.len() != n {
                return Err(Error::shape("mixing layer", weight.shape(), &[n, n]));
            }
            let mask = layer_mask(&graph, d);
            for i in 0..n {
                for j in 0..n {
                    if !mask[i][j] && weight.get(i, j) != 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {d} weight ({i}, {j}) is outside the structure mask"
                        )));
                    }
                }
            }
            if det_and_condition(&weight).0.abs() <= MIN_ABS_DET {
                return Err(Error::SingularLayer(d));
            }
            layers.push(MixingLayer { weight, bias, mask });
        }
        Ok(MixingSpec {
            graph,
            layers,
            slope,
            seed: 0,
        })
    }

    pub fn zero_bias(mut self) -> Self {
        for l in &mut self.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        self
    }

    pub fn n_latent(&self) -> usize {
        self.graph.n_latent()
    }

    pub fn n_obs(&self) -> usize {
        self.graph.n_obs()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn check_cols(&self, op: &'static str, t: &Tensor, expected: usize) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != expected {
            return Err(Error::shape(op, t.shape(), &[t.rows(), expected]));
        }
        Ok(())
    }

    /// `x = g(z)` row-wise.
    pub fn mix(&self, z: &Tensor) -> Result<Tensor> {
        self.check_cols("mix", z, self.n_latent())?;
        let mut h = z.clone();
        for layer in &self.layers {
            h = h.matmul(&layer.weight)?;
            let c = h.cols();
            for (k, v) in h.data_mut().iter_mut().enumerate() {
                *v = leaky_relu(*v + layer.bias[k % c], self.slope);
            }
        }
        Ok(h)
    }

    /// Exact layerwise inverse `z = g⁻¹(x)`.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check_cols("invert", x, self.n_obs())?;
        let inv_slope = 1.0 / self.slope;
        let mut h = x.clone();
        for (d, layer) in self.layers.iter().enumerate().rev() {
            let c = h.cols();
            for (k, v) in h.data_mut().iter_mut().enumerate() {
                *v = leaky_relu(*v, inv_slope) - layer.bias[k % c];
            }
            h = self.solve_layer(d, &h)?;
        }
        Ok(h)
    }

    /// Solves `y = h W` for `h`, row by row.
    fn solve_layer(&self, d: usize, y: &Tensor) -> Result<Tensor> {
        let inv = self.layer_inverse(d)?;
        y.matmul(&inv)
    }

    /// `W⁻¹` of layer `d`.
    pub fn layer_inverse(&self, d: usize) -> Result<Tensor> {
        let w = &self.layers[d].weight;
        let n = w.rows();
        let m = DMatrix::from_row_slice(n, n, w.data());
        let inv = m.lu().try_inverse().ok_or(Error::SingularLayer(d))?;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(inv[(i, j)]);
            }
        }
        Tensor::matrix(n, n, data)
    }

    /// Records `g(z)` on a tape with the weights as constants.
    pub fn mix_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mut h = z;
        for layer in &self.layers {
            let w = tape.constant(layer.weight.clone());
            let b = tape.constant(Tensor::matrix(1, layer.bias.len(), layer.bias.clone())?);
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            h = tape.leaky_relu(h, self.slope);
        }
        Ok(h)
    }

    /// Records `g⁻¹(x)` on a tape.
    pub fn invert_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (d, layer) in self.layers.iter().enumerate().rev() {
            let inv = tape.constant(self.layer_inverse(d)?);
            let b = tape.constant(Tensor::matrix(1, layer.bias.len(), layer.bias.clone())?);
            h = tape.leaky_relu(h, 1.0 / self.slope);
            h = tape.sub(h, b)?;
            h = tape.matmul(h, inv)?;
        }
        Ok(h)
    }

    /// SHA-256 over a canonical little-endian encoding of the spec.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"mixing-spec/v1");
        hasher.update((self.n_latent() as u64).to_le_bytes());
        hasher.update((self.n_obs() as u64).to_le_bytes());
        for row in self.graph.adjacency() {
            hasher.update(row.iter().map(|&e| e as u8).collect::<Vec<_>>());
        }
        hasher.update(self.slope.to_le_bytes());
        hasher.update(self.seed.to_le_bytes());
        for layer in &self.layers {
            for v in layer.weight.data().iter().chain(&layer.bias) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_graph(n: usize, rng: &mut SeededRng) -> MixingGraph {
        loop {
            let adj: Vec<Vec<bool>> = (0..n)
                .map(|i| (0..n).map(|j| i == j || rng.uniform() < 0.35).collect())
                .collect();
            if let Ok(g) = MixingGraph::new(adj) {
                return g;
            }
        }
    }

    #[test]
    fn identity_spec_is_leaky_relu() {
        let g = MixingGraph::identity(3);
        let spec = MixingSpec::from_weights(g, vec![Tensor::identity(3)], vec![vec![0.0; 3]], 0.2).unwrap();
        let z = Tensor::matrix(1, 3, vec![-1.0, 0.5, 0.0]).unwrap();
        assert_eq!(spec.mix(&z).unwrap().data(), &[-0.2, 0.5, 0.0]);
        let x = Tensor::matrix(1, 3, vec![-0.2, 0.5, 0.0]).unwrap();
        let back = spec.invert(&x).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let spec = MixingSpec::build(MixingGraph::fully_connected(4), 3, 9).unwrap().zero_bias();
        let x = spec.mix(&Tensor::zeros(&[2, 4])).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_weights_are_exact_zeros() {
        let mut rng = SeededRng::new(1);
        let g = random_graph(5, &mut rng);
        let spec = MixingSpec::build(g.clone(), 3, 4).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if !g.has_edge(i, j) {
                    assert_eq!(spec.layers[0].weight.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = MixingSpec::build(MixingGraph::identity(3), 1, 0).unwrap();
        assert!(matches!(spec.mix(&Tensor::zeros(&[2, 4])), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(spec.invert(&Tensor::zeros(&[2, 2])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn digest_is_deterministic_and_seed_sensitive() {
        let g = MixingGraph::fully_connected(4);
        let a = MixingSpec::build(g.clone(), 2, 5).unwrap();
        let b = MixingSpec::build(g.clone(), 2, 5).unwrap();
        let c = MixingSpec::build(g, 2, 6).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn rejects_zero_depth() {
        assert!(MixingSpec::build(MixingGraph::identity(2), 0, 0).is_err());
    }
}
