use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Factorised Gaussian `p(z | u) = Π_i N(z_i; μ_{u,i}, exp(logvar_{u,i}))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPrior {
    pub means: Vec<Vec<f64>>,
    pub log_vars: Vec<Vec<f64>>,
}

impl DomainPrior {
    pub fn new(means: Vec<Vec<f64>>, log_vars: Vec<Vec<f64>>) -> Result<Self> {
        if means.is_empty() || means.len() != log_vars.len() {
            return Err(Error::InvalidArgument(
                "prior needs matching, nonempty mean and log-variance tables".into(),
            ));
        }
        let n = means[0].len();
        if means.iter().chain(&log_vars).any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("ragged prior tables".into()));
        }
        if log_vars.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("log-variances must be finite".into()));
        }
        Ok(DomainPrior { means, log_vars })
    }

    /// Means uniform in `[-2, 2]`, log-variances uniform in `[-1, 0.5]`,
    /// drawn domain by domain.
    pub fn random(n_domains: usize, n_latent: usize, rng: &mut SeededRng) -> Self {
        let mut means = Vec::with_capacity(n_domains);
        let mut log_vars = Vec::with_capacity(n_domains);
        for _ in 0..n_domains {
            means.push((0..n_latent).map(|_| rng.uniform_in(-2.0, 2.0)).collect());
            log_vars.push((0..n_latent).map(|_| rng.uniform_in(-1.0, 0.5)).collect());
        }
        DomainPrior { means, log_vars }
    }

    pub fn n_domains(&self) -> usize {
        self.means.len()
    }

    pub fn n_latent(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, u: usize, i: usize) -> f64 {
        self.means[u][i]
    }

    pub fn variance(&self, u: usize, i: usize) -> f64 {
        self.log_vars[u][i].exp()
    }

    pub fn std(&self, u: usize, i: usize) -> f64 {
        (0.5 * self.log_vars[u][i]).exp()
    }

    /// `log p(z | u)` for one latent vector.
    pub fn log_density(&self, z: &[f64], u: usize) -> f64 {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                let var = self.variance(u, i);
                -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (zi - self.mean(u, i)).powi(2) / var
            })
            .sum()
    }

    /// First-order score `∂ log p(z|u) / ∂z_i = −(z_i − μ_{u,i}) / σ²_{u,i}`.
    pub fn score(&self, z_i: f64, u: usize, i: usize) -> f64 {
        -(z_i - self.mean(u, i)) / self.variance(u, i)
    }

    /// Second-order score `∂² log p(z|u) / ∂z_i² = −1 / σ²_{u,i}`.
    pub fn second_score(&self, u: usize, i: usize) -> f64 {
        -1.0 / self.variance(u, i)
    }

    /// Whether any two domains differ in at least one parameter.
    pub fn has_variation(&self) -> bool {
        (1..self.n_domains()).any(|u| self.means[u] != self.means[0] || self.log_vars[u] != self.log_vars[0])
    }

    /// Same prior with domains listed in `order`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        DomainPrior {
            means: order.iter().map(|&u| self.means[u].clone()).collect(),
            log_vars: order.iter().map(|&u| self.log_vars[u].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_prior_varies_and_is_positive() {
        let p = DomainPrior::random(3, 4, &mut SeededRng::new(0));
        assert!(p.has_variation());
        for u in 0..3 {
            for i in 0..4 {
                assert!(p.variance(u, i) > 0.0);
                assert!((-2.0..2.0).contains(&p.mean(u, i)));
            }
        }
    }

    #[test]
    fn rejects_non_finite_log_variance() {
        assert!(DomainPrior::new(vec![vec![0.0]], vec![vec![f64::NEG_INFINITY]]).is_err());
    }
}
