use serde::{Deserialize, Serialize};

use crate::cgvae::CgvaeModel;
use crate::error::{Error, Result};
use crate::metrics::max_weight_assignment;
use crate::numerics::{Tape, Tensor};
use crate::synthgen::MixingSpec;

pub const DEFAULT_BLOCK_THRESHOLD: f64 = 0.1;

/// Jacobian of `h = g⁻¹ ∘ ĝ` at a set of latent points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HJacobianEstimate {
    /// `per_point[p][i][j] = ∂z_i/∂ẑ_j` at point `p`.
    pub per_point: Vec<Vec<Vec<f64>>>,
    /// Mean of `|∂z_i/∂ẑ_j|` over points.
    pub mean_abs: Vec<Vec<f64>>,
    /// Standard deviation of each estimated latent over the points, used to
    /// put columns on a common scale.
    pub latent_sd: Vec<f64>,
}

fn column_sd(points: &Tensor) -> Vec<f64> {
    let p = points.rows() as f64;
    (0..points.cols())
        .map(|j| {
            let c = points.column(j);
            let m = c.iter().sum::<f64>() / p;
            (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / p).sqrt()
        })
        .collect()
}

fn check_dims(spec: &MixingSpec, model: &CgvaeModel, points: &Tensor) -> Result<()> {
    if model.config.n_obs != spec.n_obs() || model.n_latent() != spec.n_latent() {
        return Err(Error::shape(
            "model vs mixer",
            &[model.n_latent(), model.config.n_obs],
            &[spec.n_latent(), spec.n_obs()],
        ));
    }
    if points.cols() != model.n_latent() || points.rows() == 0 {
        return Err(Error::shape("latent points", points.shape(), &[0, model.n_latent()]));
    }
    Ok(())
}

/// Differentiates `ẑ ↦ g⁻¹(decoder(ẑ))` with one reverse pass per true
/// latent; rows are independent so each pass yields a full column block.
pub fn estimate_h_jacobian(spec: &MixingSpec, model: &CgvaeModel, points: &Tensor) -> Result<HJacobianEstimate> {
    check_dims(spec, model, points)?;
    let (p, n) = (points.rows(), points.cols());
    let mut tape = Tape::new();
    let zh = tape.param(points.clone());
    let x = model.decode_on_tape(&mut tape, zh)?;
    let z = spec.invert_on_tape(&mut tape, x)?;
    let mut per_point = vec![vec![vec![0.0; n]; n]; p];
    for i in 0..n {
        let zi = tape.slice_cols(z, i, 1)?;
        let root = tape.sum(zi);
        let g = tape.backward(root)?.wrt(zh);
        for (pt, jac) in per_point.iter_mut().enumerate() {
            jac[i].copy_from_slice(g.row(pt));
        }
    }
    let mut mean_abs = vec![vec![0.0; n]; n];
    for jac in &per_point {
        for i in 0..n {
            for j in 0..n {
                mean_abs[i][j] += jac[i][j].abs() / p as f64;
            }
        }
    }
    Ok(HJacobianEstimate {
        per_point,
        mean_abs,
        latent_sd: column_sd(points),
    })
}

/// Mean `|∂x̂_k/∂ẑ_j| · sd(ẑ_j)` over the points, indexed `[j][k]`.
pub fn decoder_edge_mass(model: &CgvaeModel, points: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (p, n) = (points.rows(), points.cols());
    let mut tape = Tape::new();
    let dec = model.decoder.bind_frozen(&mut tape, "decoder");
    let zv = tape.constant(points.clone());
    let trace = dec.trace(&mut tape, zv)?;
    let jac = dec.jacobian(&mut tape, &trace, n)?;
    let jac = tape.value(jac);
    let sd = column_sd(points);
    let m = jac.cols();
    let mut mass = vec![vec![0.0; m]; n];
    for (j, row) in mass.iter_mut().enumerate() {
        for b in 0..p {
            for (k, v) in row.iter_mut().enumerate() {
                *v += jac.get(j * p + b, k).abs() * sd[j] / p as f64;
            }
        }
    }
    Ok(mass)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPair {
    /// Observed coordinate.
    pub k: usize,
    /// Estimated latent.
    pub z_hat: usize,
    /// True latent matched to `z_hat`.
    pub matched_latent: usize,
    /// Share of `x̂_k`'s scaled sensitivity that comes from `ẑ_j`.
    pub decoder_share: f64,
    /// Largest row-normalised `|∂z_i/∂ẑ_j|` over `i ∈ Pa(x_k)`.
    pub max_h_share: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub threshold: f64,
    /// `matching[i]` is the estimated latent assigned to true latent `i`.
    pub matching: Vec<usize>,
    /// Row-normalised scaled `|J_h|`, `[i][j]`.
    pub h_share: Vec<Vec<f64>>,
    /// Column-normalised decoder edge mass, `[j][k]`.
    pub decoder_share: Vec<Vec<f64>>,
    /// Fraction of decoder edge mass on edges absent from the true graph
    /// under the matching.
    pub off_support_mass: f64,
    pub pairs: Vec<BlockPair>,
    pub failed: usize,
    pub all_pass: bool,
}

/// Tests the block-zero structure of `J_h` for every pair `(x_k, ẑ_j)`
/// whose matched true latent does not feed `x_k`. A pair passes when the
/// decoder has no appreciable edge `ẑ_j → x̂_k` and no parent of `x_k`
/// depends appreciably on `ẑ_j`, both judged against `threshold`.
/// Estimated latents are matched to true ones by maximum-weight
/// assignment on the row-normalised `|J_h|`.
pub fn check_subspace_blocks(
    jac: &HJacobianEstimate,
    spec: &MixingSpec,
    model: &CgvaeModel,
    points: &Tensor,
    threshold: f64,
) -> Result<BlockReport> {
    check_dims(spec, model, points)?;
    let n = jac.mean_abs.len();
    if n != spec.n_latent() || jac.latent_sd.len() != n {
        return Err(Error::shape("h jacobian", &[n], &[spec.n_latent()]));
    }
    let h_share: Vec<Vec<f64>> = jac
        .mean_abs
        .iter()
        .map(|row| {
            let scaled: Vec<f64> = row.iter().zip(&jac.latent_sd).map(|(v, s)| v * s).collect();
            let t: f64 = scaled.iter().sum();
            scaled.iter().map(|v| if t > 0.0 { v / t } else { 0.0 }).collect()
        })
        .collect();
    let matching = max_weight_assignment(&h_share)?;
    let mut owner = vec![0usize; n];
    for (i, &j) in matching.iter().enumerate() {
        owner[j] = i;
    }

    let mass = decoder_edge_mass(model, points)?;
    let m = spec.n_obs();
    let mut decoder_share = vec![vec![0.0; m]; n];
    for k in 0..m {
        let t: f64 = (0..n).map(|j| mass[j][k]).sum();
        for j in 0..n {
            decoder_share[j][k] = if t > 0.0 { mass[j][k] / t } else { 0.0 };
        }
    }
    let total: f64 = mass.iter().flatten().sum();
    let off: f64 = (0..n)
        .flat_map(|j| (0..m).map(move |k| (j, k)))
        .filter(|&(j, k)| !spec.graph.has_edge(owner[j], k))
        .map(|(j, k)| mass[j][k])
        .sum();

    let mut pairs = Vec::new();
    for k in 0..m {
        let parents = spec.graph.parents(&[k]);
        for j in 0..n {
            if parents.contains(&owner[j]) {
                continue;
            }
            let max_h_share = parents.iter().map(|&i| h_share[i][j]).fold(0.0, f64::max);
            let share = decoder_share[j][k];
            pairs.push(BlockPair {
                k,
                z_hat: j,
                matched_latent: owner[j],
                decoder_share: share,
                max_h_share,
                pass: share < threshold && max_h_share < threshold,
            });
        }
    }
    let failed = pairs.iter().filter(|p| !p.pass).count();
    Ok(BlockReport {
        threshold,
        matching,
        h_share,
        decoder_share,
        off_support_mass: if total > 0.0 { off / total } else { 0.0 },
        all_pass: failed == 0,
        failed,
        pairs,
    })
}
