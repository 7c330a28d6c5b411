use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dislab_core::cgvae::Checkpoint;
use dislab_core::metrics::{evaluate_latents, mcc, EvalOptions, MetricReport};
use dislab_core::synthgen::DatasetBundle;

use crate::config::{data_id, Cell, ExperimentConfig, Layout, Variant};
use crate::data::load_dataset;
use crate::{parallel_map, Failure};

/// Mean and sample standard deviation (`n − 1` denominator); the
/// deviation of a single value is undefined and reported as NaN.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Scores one trained cell on its dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &DatasetBundle, run_id: &str, seed: u64, opts: &EvalOptions) -> Result<MetricReport> {
    let tc = ck.train_config.clone().unwrap_or_default();
    if let Some(d) = &ck.dataset_digest {
        if *d != data.digest() {
            bail!("checkpoint was trained on a different dataset");
        }
    }
    let est_train = ck.model.encode_mean(&data.train_x())?;
    let est_test = ck.model.encode_mean(&data.test_x())?;
    let s = evaluate_latents(&est_train, &data.train_z(), &est_test, &data.test_z(), opts)?;
    Ok(MetricReport {
        run_id: run_id.to_string(),
        seed,
        n_domains: data.n_domains(),
        alpha: tc.effective_alpha(),
        beta: tc.beta,
        penalty_kind: tc.penalty_kind.as_str().to_string(),
        mcc: s.mcc,
        disentanglement: s.dci.disentanglement,
        completeness: s.dci.completeness,
        informativeness: s.dci.informativeness,
        r2: s.dci.r2,
        mse: s.dci.mse,
    })
}

pub fn write_metrics(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(MetricReport::CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != MetricReport::CSV_HEADER {
        bail!("{} has an unexpected header {header:?}", path.display());
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean and sample standard deviation of every metric over the seeds of
/// one (domain count, variant) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n_domains: usize,
    pub variant: String,
    pub n: usize,
    pub mcc_mean: f64,
    pub mcc_std: f64,
    pub disentanglement_mean: f64,
    pub disentanglement_std: f64,
    pub completeness_mean: f64,
    pub completeness_std: f64,
    pub informativeness_mean: f64,
    pub informativeness_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
}

/// Variant named in a run id, or the penalty kind when the id is foreign.
pub fn row_variant(r: &MetricReport) -> String {
    Cell::parse(&r.run_id).map_or_else(|| r.penalty_kind.clone(), |c| c.variant.to_string())
}

/// Groups rows by domain count and variant, ordered by domain count and
/// then by variant.
pub fn aggregate(rows: &[MetricReport]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, String), Vec<&MetricReport>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.n_domains, row_variant(r))).or_default().push(r);
    }
    let order = |v: &str| v.parse::<Variant>().map_or(usize::MAX, |v| v as usize);
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort_by(|a, b| (a.0, order(&a.1), &a.1).cmp(&(b.0, order(&b.1), &b.1)));
    keys.into_iter()
        .map(|key| {
            let g = &groups[&key];
            let stat = |f: fn(&MetricReport) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mcc_mean, mcc_std) = stat(|r| r.mcc);
            let (disentanglement_mean, disentanglement_std) = stat(|r| r.disentanglement);
            let (completeness_mean, completeness_std) = stat(|r| r.completeness);
            let (informativeness_mean, informativeness_std) = stat(|r| r.informativeness);
            let (r2_mean, r2_std) = stat(|r| r.r2);
            let (mse_mean, mse_std) = stat(|r| r.mse);
            AggregateRow {
                n_domains: key.0,
                variant: key.1,
                n: g.len(),
                mcc_mean,
                mcc_std,
                disentanglement_mean,
                disentanglement_std,
                completeness_mean,
                completeness_std,
                informativeness_mean,
                informativeness_std,
                r2_mean,
                r2_std,
                mse_mean,
                mse_std,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// MCC of the exact ground-truth inverse on a test split; 1 up to rounding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub data_id: String,
    pub mcc: f64,
}

pub fn oracle_mcc(data: &DatasetBundle, opts: &EvalOptions) -> Result<f64> {
    let z_hat = data.spec.invert(&data.test_x())?;
    Ok(mcc(&data.test_z(), &z_hat, opts.correlation)?)
}

pub struct EvalSummary {
    pub rows: Vec<MetricReport>,
    pub aggregates: Vec<AggregateRow>,
    pub failures: Vec<Failure>,
}

/// Scores every cell with a checkpoint and rewrites `metrics.csv`,
/// `metrics_summary.csv` and `oracle_check.csv`. Cells without a usable
/// checkpoint are reported as failures.
pub fn eval_all(cfg: &ExperimentConfig, layout: &Layout, jobs: usize) -> Result<EvalSummary> {
    let mut failures = Vec::new();
    let mut datasets = BTreeMap::new();
    let mut oracle = Vec::new();
    for &d in &cfg.n_domains {
        match load_dataset(layout, &cfg.preset, d) {
            Ok(b) => {
                oracle.push(OracleRow {
                    data_id: data_id(&cfg.preset, d),
                    mcc: oracle_mcc(&b, &cfg.eval)?,
                });
                datasets.insert(d, b);
            }
            Err(e) => failures.push(Failure::new("eval", data_id(&cfg.preset, d), e)),
        }
    }
    let cells: Vec<Cell> = cfg.cells().into_iter().filter(|c| datasets.contains_key(&c.n_domains)).collect();
    let results = parallel_map(&cells, jobs, |cell| -> Result<MetricReport> {
        let dir = layout.run_dir(cell);
        let ck = Checkpoint::load(&dir).with_context(|| format!("missing or unreadable checkpoint in {}", dir.display()))?;
        evaluate_checkpoint(&ck, &datasets[&cell.n_domains], &cell.run_id(), cell.seed, &cfg.eval)
    })?;
    let mut rows = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(Failure::new("eval", cell.run_id(), e)),
        }
    }
    fs::create_dir_all(&layout.root)?;
    write_metrics(&layout.metrics_csv(), &rows)?;
    let aggregates = aggregate(&rows);
    write_csv(&layout.aggregates_csv(), &aggregates)?;
    write_csv(&layout.root.join("oracle_check.csv"), &oracle)?;
    Ok(EvalSummary {
        rows,
        aggregates,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[0.95, 0.96, 0.94]);
        assert!((m - 0.95).abs() < 1e-12);
        assert!((s - 0.01).abs() < 1e-12);
        assert!(mean_std(&[1.0]).1.is_nan());
    }
}
