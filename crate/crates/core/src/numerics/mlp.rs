use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::{leaky_relu, leaky_relu_grad, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Affine layer `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_in(-bound, bound)).collect();
        let b = (0..fan_out).map(|_| rng.uniform_in(-bound, bound)).collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("shape"),
            bias: Tensor::matrix(1, fan_out, b).expect("shape"),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// LeakyReLU multilayer perceptron. The activation follows every layer
/// except the last, unless `final_activation` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
    pub final_activation: bool,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`.
    pub fn new(sizes: &[usize], slope: f64, rng: &mut SeededRng) -> Self {
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Mlp {
            layers,
            slope,
            final_activation: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_activation
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    /// Forward pass outside any tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            let c = h.cols();
            let bias = layer.bias.data();
            let act = self.activated(i);
            for (k, v) in h.data_mut().iter_mut().enumerate() {
                *v += bias[k % c];
                if act {
                    *v = leaky_relu(*v, self.slope);
                }
            }
        }
        Ok(h)
    }

    /// Registers the weights on `tape` as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape, name: &'static str) -> BoundMlp {
        self.bind_with(tape, name, true)
    }

    /// Registers the weights as constants (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape, name: &'static str) -> BoundMlp {
        self.bind_with(tape, name, false)
    }

    fn bind_with(&self, tape: &mut Tape, name: &'static str, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let leaf = |t: &mut Tape, x: &Tensor| {
                    if trainable {
                        t.param(x.clone())
                    } else {
                        t.constant(x.clone())
                    }
                };
                (leaf(tape, &l.weight), leaf(tape, &l.bias))
            })
            .collect();
        BoundMlp {
            name,
            layers,
            slope: self.slope,
            final_activation: self.final_activation,
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub name: &'static str,
    pub layers: Vec<(Var, Var)>,
    pub slope: f64,
    pub final_activation: bool,
}

/// Output of a forward pass plus the pre-activations needed for tangent
/// propagation.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub output: Var,
    pub preacts: Vec<Var>,
}

impl BoundMlp {
    pub fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_activation
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.trace(tape, x)?.output)
    }

    pub fn trace(&self, tape: &mut Tape, x: Var) -> Result<MlpTrace> {
        let mut h = x;
        let mut preacts = Vec::with_capacity(self.layers.len());
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            preacts.push(z);
            h = if self.activated(i) {
                tape.leaky_relu(z, self.slope)
            } else {
                z
            };
            if !tape.value(h).all_finite() {
                return Err(Error::NonFiniteActivation {
                    network: self.name,
                    layer: i,
                });
            }
        }
        Ok(MlpTrace { output: h, preacts })
    }

    /// Input-output Jacobian by forward tangent propagation, recorded on the
    /// tape so it stays differentiable with respect to the weights.
    ///
    /// Returns a `[n_in * batch, n_out]` matrix whose row `j * batch + b`
    /// is `∂y_b / ∂x_{b,j}`. LeakyReLU derivatives are piecewise constant,
    /// so they enter as constants.
    pub fn jacobian(&self, tape: &mut Tape, trace: &MlpTrace, n_in: usize) -> Result<Var> {
        let batch = tape.value(trace.preacts[0]).rows();
        let mut seed = Tensor::zeros(&[n_in * batch, n_in]);
        for j in 0..n_in {
            for b in 0..batch {
                seed.set(j * batch + b, j, 1.0);
            }
        }
        let mut t = tape.constant(seed);
        for (i, &(w, _)) in self.layers.iter().enumerate() {
            t = tape.matmul(t, w)?;
            if self.activated(i) {
                let pre = tape.value(trace.preacts[i]);
                let width = pre.cols();
                let mut mask = Vec::with_capacity(n_in * batch * width);
                for _ in 0..n_in {
                    mask.extend(pre.data().iter().map(|&v| leaky_relu_grad(v, self.slope)));
                }
                let mask = tape.constant(Tensor::matrix(n_in * batch, width, mask)?);
                t = tape.mul(t, mask)?;
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::central_jacobian;

    #[test]
    fn apply_matches_tape_forward() {
        let mut rng = SeededRng::new(11);
        let mlp = Mlp::new(&[3, 8, 8, 2], 0.2, &mut rng);
        let x = Tensor::matrix(4, 3, rng.normals(12)).unwrap();
        let direct = mlp.apply(&x).unwrap();
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, "test");
        let xv = tape.constant(x);
        let y = bound.forward(&mut tape, xv).unwrap();
        assert!(direct.max_abs_diff(tape.value(y)) < 1e-14);
    }

    #[test]
    fn tangent_jacobian_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let mlp = Mlp::new(&[3, 6, 6, 4], 0.2, &mut rng);
        let x = Tensor::matrix(2, 3, rng.normals(6)).unwrap();
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, "test");
        let xv = tape.constant(x.clone());
        let tr = bound.trace(&mut tape, xv).unwrap();
        let jac = bound.jacobian(&mut tape, &tr, 3).unwrap();
        let jac = tape.value(jac).clone();
        for b in 0..2 {
            let fd = central_jacobian(|v| mlp.apply(&Tensor::matrix(1, 3, v.to_vec()).unwrap()).unwrap().into_data(), x.row(b), 1e-6);
            for j in 0..3 {
                for i in 0..4 {
                    let exact = jac.get(j * 2 + b, i);
                    assert!((exact - fd[i][j]).abs() < 1e-7, "b{b} j{j} i{i}: {exact} vs {}", fd[i][j]);
                }
            }
        }
    }
}
