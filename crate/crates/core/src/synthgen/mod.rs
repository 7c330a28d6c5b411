//! Synthetic multi-domain data: sparse invertible ground-truth mixers
//! applied to domain-conditioned factorised Gaussian latents.

pub mod dataset;
pub mod graph;
pub mod mixing;
pub mod prior;

pub use dataset::{sample_dataset, DatasetBundle, Provenance};
pub use graph::MixingGraph;
pub use mixing::{MixingLayer, MixingSpec};
pub use prior::DomainPrior;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Mixer depth used by the presets.
pub const PRESET_DEPTH: usize = 2;
pub const PRESET_LATENTS: usize = 4;

/// Adjacency of a named preset over 4 latents / 4 observations.
///
/// * `A`: `z1→x1,x2; z2→x2,x3; z3→x3,x4; z4→x4`
/// * `B`: `A` plus `z1→x3`
/// * `C`: `A` plus `z1→x3`, `z2→x4`, `z4→x1`
/// * `full`: every latent feeds every observation
pub fn preset_graph(name: &str) -> Result<MixingGraph> {
    let chain = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3)];
    let extra: &[(usize, usize)] = match name {
        "A" => &[],
        "B" => &[(0, 2)],
        "C" => &[(0, 2), (1, 3), (3, 0)],
        "full" => return Ok(MixingGraph::fully_connected(PRESET_LATENTS)),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    let edges: Vec<_> = chain.iter().chain(extra).copied().collect();
    MixingGraph::from_edges(PRESET_LATENTS, &edges)
}

/// Mixer and per-domain prior for a preset. The mixer depends on `seed`
/// only; domain parameters are drawn domain by domain from a separate
/// stream, so growing `n_domains` extends rather than reshuffles them.
pub fn preset(name: &str, n_domains: usize, seed: u64) -> Result<(MixingSpec, DomainPrior)> {
    if n_domains == 0 {
        return Err(Error::InvalidArgument("a preset needs at least one domain".into()));
    }
    let graph = preset_graph(name)?;
    let mut root = SeededRng::new(seed);
    let spec_seed = root.next_u64();
    let mut prior_rng = root.fork(2);
    let spec = MixingSpec::build(graph, PRESET_DEPTH, spec_seed)?;
    let prior = DomainPrior::random(n_domains, spec.n_latent(), &mut prior_rng);
    Ok((spec, prior))
}

/// [`preset`] followed by [`sample_dataset`], with provenance filled in.
pub fn preset_dataset(name: &str, n_domains: usize, n_per_domain: usize, seed: u64) -> Result<DatasetBundle> {
    let (spec, prior) = preset(name, n_domains, seed)?;
    let mut bundle = sample_dataset(&spec, &prior, n_per_domain, seed.wrapping_add(0x5eed))?;
    bundle.provenance.preset = Some(name.to_string());
    bundle.provenance.stand_in_graph = true;
    Ok(bundle)
}
