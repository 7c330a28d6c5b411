use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use dislab_core::cgvae::{train, CgvaeModel, Checkpoint, EpochRecord, TrainConfig};
use dislab_core::synthgen::DatasetBundle;

use crate::config::{Cell, ExperimentConfig, Layout};
use crate::data::load_dataset;
use crate::{parallel_map, Failure};

pub const LOSSES_CSV: &str = "losses.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Trained,
    /// A valid checkpoint for the same data and config was already present.
    Skipped,
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    recon: f64,
    kl: f64,
    sparsity: f64,
    mask: f64,
    total: f64,
}

/// Training config of a cell: the variant applied to the base config with
/// the cell's seed.
pub fn cell_train_config(cfg: &ExperimentConfig, cell: &Cell) -> TrainConfig {
    TrainConfig {
        seed: cell.seed,
        ..cell.variant.apply(&cfg.train)
    }
}

fn is_complete(dir: &Path, tc: &TrainConfig, dataset_digest: &str) -> bool {
    if !dir.join(LOSSES_CSV).is_file() {
        return false;
    }
    match Checkpoint::load(dir) {
        Ok(ck) => ck.train_config.as_ref() == Some(tc) && ck.dataset_digest.as_deref() == Some(dataset_digest),
        Err(_) => false,
    }
}

fn write_losses(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(LossRow {
            epoch: r.epoch,
            recon: r.loss.recon,
            kl: r.loss.kl,
            sparsity: r.loss.sparsity,
            mask: r.loss.mask,
            total: r.loss.total,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one cell into its run directory. The checkpoint is written last,
/// so a directory with a loadable checkpoint is a finished cell.
pub fn train_cell(cfg: &ExperimentConfig, layout: &Layout, cell: &Cell, data: &DatasetBundle, force: bool) -> Result<CellStatus> {
    let tc = cell_train_config(cfg, cell);
    let digest = data.digest();
    let dir = layout.run_dir(cell);
    if !force && is_complete(&dir, &tc, &digest) {
        return Ok(CellStatus::Skipped);
    }
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let mc = cfg.model.model_config(data.x.cols(), data.z.cols(), data.n_domains());
    let model = CgvaeModel::new(mc, cell.seed)?;
    let outcome = train(model, data, &tc)?;
    fs::create_dir_all(&dir)?;
    write_losses(&dir.join(LOSSES_CSV), &outcome.history)?;
    Checkpoint {
        model: outcome.model,
        train_config: Some(tc),
        dataset_digest: Some(digest),
    }
    .save(&dir)?;
    Ok(CellStatus::Trained)
}

pub struct TrainSummary {
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
    pub failures: Vec<Failure>,
}

/// Trains every cell, isolating failures per cell.
pub fn train_all(cfg: &ExperimentConfig, layout: &Layout, force: bool, jobs: usize) -> Result<TrainSummary> {
    let mut datasets = BTreeMap::new();
    for &d in &cfg.n_domains {
        datasets.insert(d, load_dataset(layout, &cfg.preset, d).map_err(|e| format!("{e:#}")));
    }
    let cells = cfg.cells();
    let results = parallel_map(&cells, jobs, |cell| {
        let data = datasets[&cell.n_domains].as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
        let status = train_cell(cfg, layout, cell, data, force).with_context(|| format!("training {}", cell.run_id()));
        if let Ok(s) = &status {
            eprintln!("{}: {}", cell.run_id(), if *s == CellStatus::Trained { "trained" } else { "up to date" });
        }
        status
    })?;
    let mut summary = TrainSummary {
        trained: Vec::new(),
        skipped: Vec::new(),
        failures: Vec::new(),
    };
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(CellStatus::Trained) => summary.trained.push(cell.run_id()),
            Ok(CellStatus::Skipped) => summary.skipped.push(cell.run_id()),
            Err(e) => summary.failures.push(Failure::new("train", cell.run_id(), e)),
        }
    }
    Ok(summary)
}
