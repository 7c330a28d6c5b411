use std::collections::BTreeSet;
use std::fs;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dislab_core::cgvae::Checkpoint;
use dislab_core::synthgen::{DatasetBundle, MixingGraph};
use dislab_core::theory::{
    check_a3, check_a4, check_subspace_blocks, estimate_h_jacobian, exclusive_latents, required_domains,
    AssumptionReport, BlockReport, Verdict, RANK_RTOL,
};

use crate::config::{data_id, ExperimentConfig, Layout};
use crate::data::load_dataset;
use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRequirement {
    pub latent: usize,
    pub required_domains: usize,
    pub available_domains: usize,
    pub enough_domains: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub run_id: String,
    pub report: BlockReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTheory {
    pub data_id: String,
    pub n_domains: usize,
    pub latents: Vec<LatentRequirement>,
    /// Observed subsets `k` whose parents satisfy the subspace condition.
    pub subspace_identifiable: Vec<Vec<usize>>,
    /// Latents covered by some pair `(a, k)` with both conditions met.
    pub component_identifiable: Vec<usize>,
    pub a4_applicable_pairs: usize,
    pub notes: Vec<String>,
    pub a3: Vec<AssumptionReport>,
    pub a4: Vec<AssumptionReport>,
    pub blocks: Vec<BlockEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub preset: String,
    pub rank_rtol: f64,
    pub block_threshold: f64,
    pub domains: Vec<DomainTheory>,
}

fn subsets(m: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << m)).map(|bits| (0..m).filter(|&j| bits & (1 << j) != 0).collect()).collect()
}

/// Assumption reports and domain-count requirements for one dataset.
pub fn assumption_theory(data: &DatasetBundle, seed: u64) -> Result<DomainTheory> {
    let spec = &data.spec;
    let prior = &data.prior;
    let graph: &MixingGraph = &spec.graph;
    let d = prior.n_domains();
    let required = required_domains(graph)?;
    let latents: Vec<LatentRequirement> = required
        .iter()
        .enumerate()
        .map(|(latent, &r)| LatentRequirement {
            latent,
            required_domains: r,
            available_domains: d,
            enough_domains: r <= d,
        })
        .collect();

    let all = subsets(graph.n_obs());
    let mut a3 = Vec::new();
    for k in &all {
        a3.push(check_a3(spec, prior, k, seed)?);
    }
    let a3_ok = |k: &[usize]| a3.iter().any(|r| r.k == k && r.verdict == Verdict::Satisfied);
    let subspace_identifiable: Vec<Vec<usize>> = a3
        .iter()
        .filter(|r| r.verdict == Verdict::Satisfied)
        .map(|r| r.k.clone())
        .collect();

    let mut a4 = Vec::new();
    let mut component = BTreeSet::new();
    for k in &all {
        for a in &all {
            if a.iter().any(|j| k.contains(j)) || exclusive_latents(graph, a, k).is_empty() {
                continue;
            }
            let r = check_a4(spec, prior, a, k, seed)?;
            if r.verdict == Verdict::Satisfied && a3_ok(k) {
                component.extend(r.latents.iter().copied());
            }
            a4.push(r);
        }
    }
    let mut notes = Vec::new();
    if a4.is_empty() {
        notes.push("no disjoint pair (a, k) has exclusive latents; component-wise identification falls back to the fully connected bound".to_string());
    }
    for l in &latents {
        if !l.enough_domains {
            notes.push(format!(
                "latent {} needs {} domains, {} available",
                l.latent, l.required_domains, l.available_domains
            ));
        }
    }
    Ok(DomainTheory {
        data_id: data_id(data.provenance.preset.as_deref().unwrap_or("custom"), d),
        n_domains: d,
        latents,
        subspace_identifiable,
        component_identifiable: component.into_iter().collect(),
        a4_applicable_pairs: a4.len(),
        notes,
        a3,
        a4,
        blocks: Vec::new(),
    })
}

/// Block check of a trained model at the encoded means of the first
/// `points` test rows.
pub fn block_report(ck: &Checkpoint, data: &DatasetBundle, points: usize, threshold: f64) -> Result<BlockReport> {
    let rows: Vec<usize> = data.test.iter().take(points.max(1)).copied().collect();
    let z_hat = ck.model.encode_mean(&data.x.select_rows(&rows))?;
    let jac = estimate_h_jacobian(&data.spec, &ck.model, &z_hat)?;
    Ok(check_subspace_blocks(&jac, &data.spec, &ck.model, &z_hat, threshold)?)
}

/// Builds `theory_report.json`, adding block verdicts for every cell whose
/// checkpoint exists.
pub fn check_theory(cfg: &ExperimentConfig, layout: &Layout) -> Result<(TheoryReport, Vec<Failure>)> {
    let mut failures = Vec::new();
    let mut domains = Vec::new();
    for &d in &cfg.n_domains {
        let data = load_dataset(layout, &cfg.preset, d)?;
        let mut entry = assumption_theory(&data, cfg.theory.assumption_seed)?;
        for cell in cfg.cells().into_iter().filter(|c| c.n_domains == d) {
            let dir = layout.run_dir(&cell);
            if !dir.join("model.json").is_file() {
                continue;
            }
            let r = Checkpoint::load(&dir)
                .map_err(anyhow::Error::from)
                .and_then(|ck| block_report(&ck, &data, cfg.theory.block_points, cfg.theory.block_threshold))
                .with_context(|| format!("block check for {}", cell.run_id()));
            match r {
                Ok(report) => entry.blocks.push(BlockEntry {
                    run_id: cell.run_id(),
                    report,
                }),
                Err(e) => failures.push(Failure::new("check-theory", cell.run_id(), e)),
            }
        }
        domains.push(entry);
    }
    let report = TheoryReport {
        preset: cfg.preset.clone(),
        rank_rtol: RANK_RTOL,
        block_threshold: cfg.theory.block_threshold,
        domains,
    };
    fs::create_dir_all(&layout.root)?;
    fs::write(layout.theory_report(), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((report, failures))
}
