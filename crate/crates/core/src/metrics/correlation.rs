use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    #[default]
    Pearson,
    Spearman,
}

/// `|corr(z_i, ẑ_j)|` for every true/estimated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    /// `values[i][j]` for true latent `i` and estimate `j`, in `[0, 1]`.
    pub values: Vec<Vec<f64>>,
    /// Constant columns of the true latents; their correlations are 0.
    pub constant_true: Vec<usize>,
    /// Constant columns of the estimates; their correlations are 0.
    pub constant_est: Vec<usize>,
}

/// Average ranks (ties share the mean rank), 0-based.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && values[idx[e]] == values[idx[s]] {
            e += 1;
        }
        let r = (s + e - 1) as f64 / 2.0;
        for &k in &idx[s..e] {
            out[k] = r;
        }
        s = e;
    }
    out
}

fn centered(col: Vec<f64>) -> (Vec<f64>, f64) {
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    let c: Vec<f64> = col.iter().map(|v| v - mean).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (c, norm)
}

pub fn correlation_matrix(z_true: &Tensor, z_est: &Tensor, kind: CorrelationKind) -> Result<CorrelationMatrix> {
    if z_true.rows() != z_est.rows() {
        return Err(Error::shape("correlation_matrix", z_true.shape(), z_est.shape()));
    }
    if z_true.rows() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two rows".into()));
    }
    let prep = |t: &Tensor| -> Vec<(Vec<f64>, f64)> {
        (0..t.cols())
            .map(|c| {
                let col = t.column(c);
                centered(match kind {
                    CorrelationKind::Pearson => col,
                    CorrelationKind::Spearman => ranks(&col),
                })
            })
            .collect()
    };
    let a = prep(z_true);
    let b = prep(z_est);
    let constant = |cols: &[(Vec<f64>, f64)]| -> Vec<usize> {
        cols.iter()
            .enumerate()
            .filter(|(_, (_, norm))| *norm == 0.0)
            .map(|(i, _)| i)
            .collect()
    };
    let values = a
        .iter()
        .map(|(ca, na)| {
            b.iter()
                .map(|(cb, nb)| {
                    if *na == 0.0 || *nb == 0.0 {
                        return 0.0;
                    }
                    let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
                    (dot / (na * nb)).abs().min(1.0)
                })
                .collect()
        })
        .collect();
    Ok(CorrelationMatrix {
        values,
        constant_true: constant(&a),
        constant_est: constant(&b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2.5, 0.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_sees_monotone_maps() {
        let a = Tensor::matrix(5, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = a.map(|v| v.powi(3) + 1.0);
        let s = correlation_matrix(&a, &b, CorrelationKind::Spearman).unwrap();
        assert!((s.values[0][0] - 1.0).abs() < 1e-12);
        let p = correlation_matrix(&a, &b, CorrelationKind::Pearson).unwrap();
        assert!(p.values[0][0] < 1.0);
    }

    #[test]
    fn constant_columns_are_zero() {
        let a = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let c = correlation_matrix(&a, &a, CorrelationKind::Pearson).unwrap();
        assert_eq!(c.values[1], vec![0.0, 0.0]);
        assert_eq!(c.constant_est, vec![1]);
    }
}
