use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{BoundFlow, DeepSigmoidFlow};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;

/// Learnable per-latent mask. Zero entries mark domain-invariant (content)
/// coordinates, nonzero entries domain-specific (style) ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMask {
    pub values: Tensor,
}

impl LatentMask {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        LatentMask {
            values: Tensor::matrix(1, n, values).expect("shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `L_m = Σ |m_i|`.
    pub fn l1(&self) -> f64 {
        self.values.data().iter().map(|v| v.abs()).sum()
    }

    pub fn content_dims(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.values.data()[i] == 0.0).collect()
    }
}

/// `ẑ = ε + m ⊙ F_u(ε)`, evaluated off-tape.
pub fn masked_residual(eps: &Tensor, mask: &LatentMask, flow: &DeepSigmoidFlow, u: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = flow.bind(&mut tape);
    let e = tape.constant(eps.clone());
    let m = tape.constant(mask.values.clone());
    let z = masked_residual_on_tape(&mut tape, e, m, &bound, u)?;
    Ok(tape.value(z).clone())
}

pub fn masked_residual_on_tape(tape: &mut Tape, eps: Var, mask: Var, flow: &BoundFlow, u: &[usize]) -> Result<Var> {
    let (es, ms) = (tape.shape(eps).to_vec(), tape.shape(mask).to_vec());
    if es.len() != 2 || ms != [1, es[1]] {
        return Err(Error::shape("masked_residual", &es, &ms));
    }
    let shifted = flow.forward(tape, eps, u)?.eps;
    let gated = tape.mul(shifted, mask)?;
    tape.add(eps, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn setup() -> (DeepSigmoidFlow, Tensor) {
        let mut rng = SeededRng::new(12);
        let flow = DeepSigmoidFlow::new(3, 2, 4, &mut rng);
        let eps = Tensor::matrix(3, 2, rng.normals(6)).unwrap();
        (flow, eps)
    }

    #[test]
    fn zero_mask_is_pure_content() {
        let (flow, eps) = setup();
        for d in 0..3 {
            let z = masked_residual(&eps, &LatentMask::new(vec![0.0, 0.0]), &flow, &[d; 3]).unwrap();
            assert_eq!(z, eps);
        }
    }

    #[test]
    fn content_dim_invariant_style_dim_varies() {
        let (flow, eps) = setup();
        let mask = LatentMask::new(vec![0.0, 0.7]);
        let z0 = masked_residual(&eps, &mask, &flow, &[0; 3]).unwrap();
        let z1 = masked_residual(&eps, &mask, &flow, &[1; 3]).unwrap();
        assert_eq!(z0.column(0), z1.column(0));
        assert_ne!(z0.column(1), z1.column(1));
        assert_eq!(mask.content_dims(), vec![0]);
    }

    #[test]
    fn mask_l1() {
        assert_eq!(LatentMask::new(vec![0.5, -1.25, 0.0]).l1(), 1.75);
    }

    #[test]
    fn shape_mismatch() {
        let (flow, eps) = setup();
        assert!(masked_residual(&eps, &LatentMask::new(vec![1.0; 3]), &flow, &[0; 3]).is_err());
    }
}
