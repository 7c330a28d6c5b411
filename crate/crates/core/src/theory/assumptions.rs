use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};
use crate::synthgen::{DomainPrior, MixingGraph, MixingSpec};

/// Singular values at or below `RANK_RTOL · σ_max` do not count toward rank.
pub const RANK_RTOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    InsufficientDomains,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `"A3"` or `"A4"`.
    pub assumption: String,
    pub k: Vec<usize>,
    /// Only for A4.
    pub a: Option<Vec<usize>>,
    /// `Pa(x_k)` for A3, `z_a` for A4.
    pub latents: Vec<usize>,
    pub n_domains: usize,
    pub required_rank: usize,
    /// Number of stacked difference vectors.
    pub candidate_vectors: usize,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub rank_rtol: f64,
    /// Rank of the system built from three instances; informational.
    pub three_instance_rank: Option<usize>,
    pub verdict: Verdict,
}

/// Numeric rank with relative tolerance [`RANK_RTOL`], plus the singular
/// values in descending order.
pub fn numeric_rank(rows: &[Vec<f64>]) -> (usize, Vec<f64>) {
    if rows.is_empty() || rows[0].is_empty() {
        return (0, Vec::new());
    }
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        sv.iter().filter(|&&s| s > RANK_RTOL * top).count()
    } else {
        0
    };
    (rank, sv)
}

fn latents_from_x(spec: &MixingSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.n_obs() {
        return Err(Error::shape("score instance", &[x.len()], &[spec.n_obs()]));
    }
    Ok(spec.invert(&Tensor::matrix(1, x.len(), x.to_vec())?)?.into_data())
}

fn check_subset(graph: &MixingGraph, k: &[usize]) -> Result<()> {
    if k.is_empty() || k.iter().any(|&j| j >= graph.n_obs()) {
        return Err(Error::InvalidArgument(format!("invalid observed subset {k:?}")));
    }
    Ok(())
}

/// Score vector of one domain over `Pa(x_k)`, one entry per
/// (parent, instance) with instance `(0)` negated:
/// `(∂_{z_i} log p(z^{(1)}|u), −∂_{z_i} log p(z^{(0)}|u), …)`.
/// Instances are full observation rows; latents come from the exact inverse.
/// A third instance, when given, appends `+∂_{z_i} log p(z^{(2)}|u)`.
pub fn score_vectors_w(
    spec: &MixingSpec,
    prior: &DomainPrior,
    k: &[usize],
    instances: &[Vec<f64>],
    u: usize,
) -> Result<Vec<f64>> {
    check_subset(&spec.graph, k)?;
    if !(2..=3).contains(&instances.len()) {
        return Err(Error::InvalidArgument(format!("expected 2 or 3 instances, got {}", instances.len())));
    }
    if u >= prior.n_domains() {
        return Err(Error::DomainOutOfRange {
            index: u,
            count: prior.n_domains(),
        });
    }
    let zs = instances
        .iter()
        .map(|x| latents_from_x(spec, x))
        .collect::<Result<Vec<_>>>()?;
    let parents = spec.graph.parents(k);
    let mut w = Vec::with_capacity(parents.len() * instances.len());
    for &i in &parents {
        w.push(prior.score(zs[1][i], u, i));
        w.push(-prior.score(zs[0][i], u, i));
        if let Some(z2) = zs.get(2) {
            w.push(prior.score(z2[i], u, i));
        }
    }
    Ok(w)
}

/// Instances for A3: a base point at the first domain's means and copies
/// with the parents of `x_k` moved by seeded offsets.
fn a3_instances(spec: &MixingSpec, prior: &DomainPrior, parents: &BTreeSet<usize>, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = SeededRng::new(seed);
    let base: Vec<f64> = (0..spec.n_latent()).map(|i| prior.mean(0, i)).collect();
    let mut out = Vec::with_capacity(3);
    for inst in 0..3 {
        let mut z = base.clone();
        if inst > 0 {
            for &i in parents {
                z[i] += rng.uniform_in(0.5, 1.5) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            }
        }
        out.push(spec.mix(&Tensor::matrix(1, z.len(), z)?)?.into_data());
    }
    Ok(out)
}

/// Differences against domain 0, for every other domain.
fn stacked_differences(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vectors[1..]
        .iter()
        .map(|w| w.iter().zip(&vectors[0]).map(|(a, b)| a - b).collect())
        .collect()
}

/// Generalised sufficient changes for subspace identification of
/// `Pa(x_k)`. Differences are taken for every domain against domain 0, so
/// the verdict does not depend on how domains are ordered.
pub fn check_a3(spec: &MixingSpec, prior: &DomainPrior, k: &[usize], seed: u64) -> Result<AssumptionReport> {
    check_subset(&spec.graph, k)?;
    let parents = spec.graph.parents(k);
    let required = parents.len();
    let d = prior.n_domains();
    let mut report = AssumptionReport {
        assumption: "A3".into(),
        k: k.to_vec(),
        a: None,
        latents: parents.iter().copied().collect(),
        n_domains: d,
        required_rank: required,
        candidate_vectors: d.saturating_sub(1),
        singular_values: Vec::new(),
        rank: 0,
        rank_rtol: RANK_RTOL,
        three_instance_rank: None,
        verdict: Verdict::InsufficientDomains,
    };
    let instances = a3_instances(spec, prior, &parents, seed)?;
    if d >= 2 {
        let two = (0..d)
            .map(|u| score_vectors_w(spec, prior, k, &instances[..2], u))
            .collect::<Result<Vec<_>>>()?;
        let three = (0..d)
            .map(|u| score_vectors_w(spec, prior, k, &instances, u))
            .collect::<Result<Vec<_>>>()?;
        let (rank, sv) = numeric_rank(&stacked_differences(&two));
        report.rank = rank;
        report.singular_values = sv;
        report.three_instance_rank = Some(numeric_rank(&stacked_differences(&three)).0);
    }
    report.verdict = if d < required + 1 {
        Verdict::InsufficientDomains
    } else if report.rank >= required {
        Verdict::Satisfied
    } else {
        Verdict::Violated
    };
    Ok(report)
}

/// `z_a`: latents feeding `x_a` but none of `x_k`.
pub fn exclusive_latents(graph: &MixingGraph, a: &[usize], k: &[usize]) -> BTreeSet<usize> {
    let pk = graph.parents(k);
    graph.parents(a).difference(&pk).copied().collect()
}

/// Sufficient changes for component-wise identification of `z_a`, using
/// analytic first- and second-order Gaussian scores. Coordinates outside
/// `z_a` do not enter a factorised Gaussian score, so only two `z_a`
/// instances are drawn.
pub fn check_a4(spec: &MixingSpec, prior: &DomainPrior, a: &[usize], k: &[usize], seed: u64) -> Result<AssumptionReport> {
    check_subset(&spec.graph, a)?;
    check_subset(&spec.graph, k)?;
    if a.iter().any(|j| k.contains(j)) {
        return Err(Error::InvalidArgument("x_a and x_k must be disjoint".into()));
    }
    let za = exclusive_latents(&spec.graph, a, k);
    let required = 2 * za.len();
    let d = prior.n_domains();
    let mut report = AssumptionReport {
        assumption: "A4".into(),
        k: k.to_vec(),
        a: Some(a.to_vec()),
        latents: za.iter().copied().collect(),
        n_domains: d,
        required_rank: required,
        candidate_vectors: d.saturating_sub(1),
        singular_values: Vec::new(),
        rank: 0,
        rank_rtol: RANK_RTOL,
        three_instance_rank: None,
        verdict: Verdict::NotApplicable,
    };
    if za.is_empty() {
        return Ok(report);
    }
    let mut rng = SeededRng::new(seed);
    let z0: Vec<f64> = za.iter().map(|_| rng.normal()).collect();
    let z1: Vec<f64> = za.iter().map(|_| rng.normal()).collect();
    let vectors: Vec<Vec<f64>> = (0..d)
        .map(|u| {
            let mut v = Vec::with_capacity(4 * za.len());
            for (t, &i) in za.iter().enumerate() {
                v.push(prior.second_score(u, i));
                v.push(-prior.second_score(u, i));
                v.push(prior.score(z1[t], u, i));
                v.push(-prior.score(z0[t], u, i));
            }
            v
        })
        .collect();
    if d >= 2 {
        let (rank, sv) = numeric_rank(&stacked_differences(&vectors));
        report.rank = rank;
        report.singular_values = sv;
    }
    report.verdict = if d < required + 1 {
        Verdict::InsufficientDomains
    } else if report.rank >= required {
        Verdict::Satisfied
    } else {
        Verdict::Violated
    };
    Ok(report)
}

/// Non-empty subsets of `0..m` as sorted index lists.
fn subsets(m: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << m)).map(|bits| (0..m).filter(|&j| bits & (1 << j) != 0).collect()).collect()
}

/// Per latent, the fewest domains for which some disjoint pair of observed
/// subsets `(x_a, x_k)` with `z_i ∈ z_a` yields component-wise
/// identifiability, `max(|Pa(x_k)|, 2|z_a| + 1)`. Latents without such a
/// pair fall back to the fully connected bound `2n + 1`.
pub fn required_domains(graph: &MixingGraph) -> Result<Vec<usize>> {
    let m = graph.n_obs();
    if m > 16 {
        return Err(Error::InvalidArgument(format!("subset enumeration over {m} observations is too large")));
    }
    let n = graph.n_latent();
    let mut best = vec![2 * n + 1; n];
    let all = subsets(m);
    for k in &all {
        let pk = graph.parents(k);
        for a in &all {
            if a.iter().any(|j| k.contains(j)) {
                continue;
            }
            let za: BTreeSet<usize> = graph.parents(a).difference(&pk).copied().collect();
            if za.is_empty() {
                continue;
            }
            let need = pk.len().max(2 * za.len() + 1);
            for &i in &za {
                best[i] = best[i].min(need);
            }
        }
    }
    Ok(best)
}
