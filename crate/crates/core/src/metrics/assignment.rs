//! Maximum-weight bipartite assignment.

use crate::error::{Error, Result};

/// Relative slack within which two assignment weights count as tied.
const TIE_RTOL: f64 = 1e-12;

/// Maximises `Σ_i w[i][col(i)]` over injective row→column maps, with
/// `rows ≤ cols`. Returns the column assigned to each row. Among optimal
/// maps the lexicographically smallest column sequence is returned.
pub fn max_weight_assignment(w: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = w.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = w[0].len();
    if w.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("ragged weight matrix".into()));
    }
    if n > m {
        return Err(Error::InvalidArgument(format!("{n} rows cannot be assigned to {m} columns")));
    }
    if w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite weight".into()));
    }
    let best = hungarian(w);
    let target = assignment_weight(w, &best);
    let tol = TIE_RTOL * (1.0 + target.abs()) * n as f64;

    // fix rows in order, each to the lowest column that still admits an
    // optimal completion
    let mut col = Vec::with_capacity(n);
    let mut used = vec![false; m];
    let mut prefix = 0.0;
    for i in 0..n {
        let choice = (0..m).filter(|&j| !used[j]).find(|&j| {
            let free: Vec<usize> = (0..m).filter(|&c| !used[c] && c != j).collect();
            let sub: Vec<Vec<f64>> = w[i + 1..].iter().map(|r| free.iter().map(|&c| r[c]).collect()).collect();
            let rest = if sub.is_empty() {
                0.0
            } else {
                assignment_weight(&sub, &hungarian(&sub))
            };
            prefix + w[i][j] + rest >= target - tol
        });
        match choice {
            Some(j) => {
                used[j] = true;
                prefix += w[i][j];
                col.push(j);
            }
            None => return Ok(best),
        }
    }
    Ok(col)
}

/// Shortest augmenting paths with vertex potentials, `O(rows² · cols)`.
/// Inputs are already validated.
fn hungarian(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    let m = w[0].len();
    // 1-based arrays; column 0 is the virtual start of each augmenting path
    let cost = |i: usize, j: usize| -w[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col[row_of[j] - 1] = j - 1;
        }
    }
    col
}

/// `Σ_i w[i][col[i]]`, accumulated in row order.
pub fn assignment_weight(w: &[Vec<f64>], col: &[usize]) -> f64 {
    col.iter().enumerate().map(|(i, &j)| w[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_the_anti_diagonal() {
        let w = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        assert_eq!(max_weight_assignment(&w).unwrap(), vec![1, 0]);
    }

    #[test]
    fn rectangular() {
        let w = vec![vec![0.1, 0.2, 0.9], vec![0.1, 0.8, 0.85]];
        assert_eq!(max_weight_assignment(&w).unwrap(), vec![2, 1]);
        assert!(max_weight_assignment(&[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn ties_resolve_to_lowest_columns() {
        let w = vec![vec![1.0; 3]; 3];
        assert_eq!(max_weight_assignment(&w).unwrap(), vec![0, 1, 2]);
        let w = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]];
        assert_eq!(max_weight_assignment(&w).unwrap(), vec![1, 0]);
    }
}
