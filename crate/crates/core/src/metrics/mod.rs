//! Disentanglement scores: MCC, DCI, and LASSO-based MSE / R².

pub mod assignment;
pub mod correlation;
pub mod lasso;

pub use assignment::{assignment_weight, max_weight_assignment};
pub use correlation::{correlation_matrix, ranks, CorrelationKind, CorrelationMatrix};
pub use lasso::{coordinate_descent, lasso_objective, lasso_regression, soft_threshold, CdResult, LassoFit};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_LASSO_LAMBDA: f64 = 1e-3;
pub const DCI_MIN_SAMPLES: usize = 50;

/// Matched latents and their mean absolute correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct MccResult {
    pub mcc: f64,
    /// `assignment[i]` is the estimate matched to true latent `i`.
    pub assignment: Vec<usize>,
    pub correlations: CorrelationMatrix,
}

/// Mean of the assigned `|corr|` entries under the optimal matching. When
/// the estimate has more columns than the truth the surplus goes unmatched.
pub fn mcc_detailed(z_true: &Tensor, z_est: &Tensor, kind: CorrelationKind) -> Result<MccResult> {
    if z_est.cols() < z_true.cols() {
        return Err(Error::shape("mcc", z_true.shape(), z_est.shape()));
    }
    let correlations = correlation_matrix(z_true, z_est, kind)?;
    let assignment = max_weight_assignment(&correlations.values)?;
    let mcc = assignment_weight(&correlations.values, &assignment) / z_true.cols() as f64;
    Ok(MccResult {
        mcc,
        assignment,
        correlations,
    })
}

pub fn mcc(z_true: &Tensor, z_est: &Tensor, kind: CorrelationKind) -> Result<f64> {
    Ok(mcc_detailed(z_true, z_est, kind)?.mcc)
}

fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Disentanglement and completeness of an importance matrix `r[i][j]`
/// (factor `i`, latent `j`). All-zero columns carry no weight; all-zero
/// rows score 0 completeness.
pub fn dci_scores(r: &[Vec<f64>]) -> Result<(f64, f64)> {
    let k = r.len();
    let n = r.first().map_or(0, |row| row.len());
    if k == 0 || n == 0 || r.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidArgument("importance matrix must be non-empty and rectangular".into()));
    }
    if r.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("importance entries must be finite and non-negative".into()));
    }
    let total: f64 = r.iter().flatten().sum();
    let mut disentanglement = 0.0;
    if total > 0.0 {
        for j in 0..n {
            let col: Vec<f64> = (0..k).map(|i| r[i][j]).collect();
            let s: f64 = col.iter().sum();
            if s > 0.0 {
                let p: Vec<f64> = col.iter().map(|v| v / s).collect();
                disentanglement += (s / total) * (1.0 - normalized_entropy(&p));
            }
        }
    }
    let completeness = r
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                let p: Vec<f64> = row.iter().map(|v| v / s).collect();
                1.0 - normalized_entropy(&p)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / k as f64;
    Ok((disentanglement, completeness))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dci {
    pub disentanglement: f64,
    pub completeness: f64,
    /// Held-out RMSE of the factor predictions.
    pub informativeness: f64,
    pub mse: f64,
    pub r2: f64,
    pub importance: Vec<Vec<f64>>,
}

pub fn dci(est_train: &Tensor, true_train: &Tensor, est_test: &Tensor, true_test: &Tensor, lambda: f64) -> Result<Dci> {
    if est_train.rows() < DCI_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "DCI needs at least {DCI_MIN_SAMPLES} training rows, got {}",
            est_train.rows()
        )));
    }
    let fit = lasso_regression(est_train, true_train, est_test, true_test, lambda)?;
    let importance: Vec<Vec<f64>> = fit.coef.iter().map(|r| r.iter().map(|c| c.abs()).collect()).collect();
    let (disentanglement, completeness) = dci_scores(&importance)?;
    Ok(Dci {
        disentanglement,
        completeness,
        informativeness: fit.mse.sqrt(),
        mse: fit.mse,
        r2: fit.r2,
        importance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub correlation: CorrelationKind,
    pub lasso_lambda: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            correlation: CorrelationKind::Pearson,
            lasso_lambda: DEFAULT_LASSO_LAMBDA,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub seed: u64,
    pub n_domains: usize,
    pub alpha: f64,
    pub beta: f64,
    pub penalty_kind: String,
    pub mcc: f64,
    pub disentanglement: f64,
    pub completeness: f64,
    pub informativeness: f64,
    pub r2: f64,
    pub mse: f64,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 12] = [
        "run_id",
        "seed",
        "n_domains",
        "alpha",
        "beta",
        "penalty_kind",
        "mcc",
        "disentanglement",
        "completeness",
        "informativeness",
        "r2",
        "mse",
    ];
}

/// Scores that depend only on latents: MCC on the test split, DCI and
/// LASSO fitted on train and scored on test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScores {
    pub mcc: f64,
    pub dci: Dci,
}

pub fn evaluate_latents(
    est_train: &Tensor,
    true_train: &Tensor,
    est_test: &Tensor,
    true_test: &Tensor,
    opts: &EvalOptions,
) -> Result<LatentScores> {
    Ok(LatentScores {
        mcc: mcc(true_test, est_test, opts.correlation)?,
        dci: dci(est_train, true_train, est_test, true_test, opts.lasso_lambda)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dci_two_by_two() {
        let (d, c) = dci_scores(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2f64.ln();
        assert!((d - (1.0 - h)).abs() < 1e-12);
        assert!((c - (1.0 - h)).abs() < 1e-12);
    }

    #[test]
    fn zero_row_scores_zero_completeness() {
        let (d, c) = dci_scores(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(c, 0.5);
    }
}
