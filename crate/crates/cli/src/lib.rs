//! Sweep runner: dataset generation, training, evaluation, theory checks
//! and figure-data reports, each writing plain files under one output root.

pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod theory;
pub mod train;

use std::fs;
use std::path::Path;

use anyhow::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Architecture, Cell, ExperimentConfig, Layout, TheoryOptions, Variant, SEED_ENV};

/// A sweep cell that could not be completed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub cell: String,
    pub error: String,
}

impl Failure {
    pub fn new(stage: &str, cell: impl Into<String>, error: impl std::fmt::Display) -> Self {
        Failure {
            stage: stage.to_string(),
            cell: cell.into(),
            error: format!("{error:#}"),
        }
    }
}

#[derive(Serialize)]
struct FailureManifest<'a> {
    command: &'a str,
    failures: &'a [Failure],
}

/// Writes `failures.json` when anything failed and removes a stale one
/// otherwise.
pub fn record_failures(layout: &Layout, command: &str, failures: &[Failure]) -> Result<()> {
    let path = layout.failures();
    if failures.is_empty() {
        if path.exists() {
            fs::remove_file(&path)?;
        }
        return Ok(());
    }
    fs::create_dir_all(&layout.root)?;
    let manifest = FailureManifest { command, failures };
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Runs `f` over `items` on `jobs` worker threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

pub(crate) fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}
