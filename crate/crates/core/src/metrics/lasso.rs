use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LASSO_TOL: f64 = 1e-6;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// Result of coordinate descent on one response.
#[derive(Clone, Debug, PartialEq)]
pub struct CdResult {
    pub coef: Vec<f64>,
    /// Objective after each full sweep.
    pub objectives: Vec<f64>,
}

/// `(1/2N)‖y − Xβ‖² + λ‖β‖₁`
pub fn lasso_objective(x: &Tensor, y: &[f64], coef: &[f64], lambda: f64) -> f64 {
    let n = x.rows() as f64;
    let rss: f64 = (0..x.rows())
        .map(|r| {
            let pred: f64 = x.row(r).iter().zip(coef).map(|(a, b)| a * b).sum();
            (y[r] - pred).powi(2)
        })
        .sum();
    rss / (2.0 * n) + lambda * coef.iter().map(|c| c.abs()).sum::<f64>()
}

/// Cyclic coordinate descent, stopping once no coefficient moves by more
/// than `tol` in a sweep. `y` is assumed centred; no intercept is fitted.
pub fn coordinate_descent(x: &Tensor, y: &[f64], lambda: f64, tol: f64, max_sweeps: usize) -> Result<CdResult> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::InvalidArgument(format!("lasso penalty must be non-negative, got {lambda}")));
    }
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(Error::shape("lasso", x.shape(), &[y.len()]));
    }
    let (n, p) = (x.rows(), x.cols());
    let nf = n as f64;
    let cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j)).collect();
    let sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut coef = vec![0.0; p];
    let mut resid = y.to_vec();
    let mut objectives = Vec::new();
    for _ in 0..max_sweeps {
        let mut max_step: f64 = 0.0;
        for j in 0..p {
            if sq[j] == 0.0 {
                continue;
            }
            let rho = cols[j].iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + sq[j] * coef[j];
            let new = soft_threshold(rho, lambda) / sq[j];
            let delta = new - coef[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(&cols[j]) {
                    *r -= a * delta;
                }
                coef[j] = new;
                max_step = max_step.max(delta.abs());
            }
        }
        objectives.push(lasso_objective(x, y, &coef, lambda));
        if max_step < tol {
            break;
        }
    }
    Ok(CdResult { coef, objectives })
}

/// Per-factor LASSO from estimated latents to true factors.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    /// `coef[i][j]`: weight of standardised latent `j` for factor `i`.
    pub coef: Vec<Vec<f64>>,
    /// Held-out mean squared error over all factors and rows.
    pub mse: f64,
    /// Held-out coefficient of determination averaged over factors.
    pub r2: f64,
}

fn column_stats(t: &Tensor) -> Vec<(f64, f64)> {
    let n = t.rows() as f64;
    (0..t.cols())
        .map(|j| {
            let c = t.column(j);
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

fn standardize(t: &Tensor, stats: &[(f64, f64)]) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        for (j, &(m, s)) in stats.iter().enumerate() {
            out.set(r, j, if s > 0.0 { (t.get(r, j) - m) / s } else { 0.0 });
        }
    }
    out
}

/// Standardises inputs with training statistics, fits one LASSO per factor
/// with a training-mean intercept, and scores on the test split.
pub fn lasso_regression(
    est_train: &Tensor,
    true_train: &Tensor,
    est_test: &Tensor,
    true_test: &Tensor,
    lambda: f64,
) -> Result<LassoFit> {
    if est_train.rows() != true_train.rows() || est_test.rows() != true_test.rows() {
        return Err(Error::shape("lasso_regression", est_train.shape(), true_train.shape()));
    }
    if est_train.cols() != est_test.cols() || true_train.cols() != true_test.cols() || est_test.rows() == 0 {
        return Err(Error::shape("lasso_regression", est_test.shape(), true_test.shape()));
    }
    let stats = column_stats(est_train);
    let xtr = standardize(est_train, &stats);
    let xte = standardize(est_test, &stats);
    let mut coef = Vec::with_capacity(true_train.cols());
    let mut sse_total = 0.0;
    let mut r2_total = 0.0;
    for i in 0..true_train.cols() {
        let y = true_train.column(i);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let fit = coordinate_descent(&xtr, &yc, lambda, LASSO_TOL, LASSO_MAX_SWEEPS)?;
        let yt = true_test.column(i);
        let test_mean = yt.iter().sum::<f64>() / yt.len() as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for (r, &target) in yt.iter().enumerate() {
            let pred = mean + xte.row(r).iter().zip(&fit.coef).map(|(a, b)| a * b).sum::<f64>();
            ss_res += (target - pred).powi(2);
            ss_tot += (target - test_mean).powi(2);
        }
        sse_total += ss_res;
        r2_total += if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
        coef.push(fit.coef);
    }
    let k = true_train.cols() as f64;
    Ok(LassoFit {
        coef,
        mse: sse_total / (k * true_test.rows() as f64),
        r2: r2_total / k,
    })
}
