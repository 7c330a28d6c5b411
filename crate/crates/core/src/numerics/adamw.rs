use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment buffers for decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        AdamWState {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Gradients are validated before any
    /// parameter is touched, so a rejected step leaves the state unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adamw: {} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }

        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *w -= c.lr * c.weight_decay * *w;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, [&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[Tensor::zeros(&[1, 3])], &names(1)).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut p = Tensor::scalar(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, [&p]);
        let g = Tensor::scalar(2.0 * p.item());
        st.step(&mut [&mut p], &[g], &names(1)).unwrap();
        assert!(p.item() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(θ) = Σ c_i (θ_i − t_i)², optimum θ* = t
        let target = [1.5, -0.75, 3.0];
        let curv = [1.0, 4.0, 0.5];
        let mut p = Tensor::zeros(&[3]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, [&p]);
        let mut lr = cfg.lr;
        for it in 0..1500 {
            let g: Vec<f64> = (0..3)
                .map(|i| 2.0 * curv[i] * (p.data()[i] - target[i]))
                .collect();
            // step decay so the final iterates settle inside the tolerance
            if it % 150 == 149 {
                lr *= 0.5;
                st.config.lr = lr;
            }
            st.step(&mut [&mut p], &[Tensor::new(vec![3], g).unwrap()], &names(1))
                .unwrap();
        }
        for i in 0..3 {
            assert!((p.data()[i] - target[i]).abs() < 1e-3, "{:?}", p.data());
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut st = AdamWState::new(AdamWConfig::default(), [&a, &b]);
        let err = st
            .step(
                &mut [&mut a, &mut b],
                &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)],
                &["enc.w".into(), "dec.b".into()],
            )
            .unwrap_err();
        assert!(err.to_string().contains("dec.b"));
        assert_eq!(a.item(), 1.0);
        assert_eq!(st.step_count(), 0);
    }
}
