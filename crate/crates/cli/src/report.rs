use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;

use crate::config::{Layout, Variant};
use crate::eval::{aggregate, read_metrics, write_csv, AggregateRow};

#[derive(Serialize)]
struct McCurveRow<'a> {
    n_domains: usize,
    variant: &'a str,
    n: usize,
    mcc_mean: f64,
    mcc_std: f64,
}

#[derive(Serialize)]
struct PenaltyRow {
    n_domains: usize,
    metric: &'static str,
    l1_mean: f64,
    l1_std: f64,
    l2_mean: f64,
    l2_std: f64,
}

const METRICS: [&str; 6] = ["mcc", "disentanglement", "completeness", "informativeness", "r2", "mse"];

fn metric(a: &AggregateRow, name: &str) -> (f64, f64) {
    match name {
        "mcc" => (a.mcc_mean, a.mcc_std),
        "disentanglement" => (a.disentanglement_mean, a.disentanglement_std),
        "completeness" => (a.completeness_mean, a.completeness_std),
        "informativeness" => (a.informativeness_mean, a.informativeness_std),
        "r2" => (a.r2_mean, a.r2_std),
        _ => (a.mse_mean, a.mse_std),
    }
}

/// Writes figure and table data derived from `metrics.csv` alone:
///
/// * `mcc_vs_domains.csv`: MCC mean/std per domain count and variant
/// * `table_d<n>.csv`: every metric by variant at one domain count
/// * `l1_vs_l2.csv`: L1 against L2 penalty where both were run
pub fn write_report(layout: &Layout) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(&layout.metrics_csv())?;
    let agg = aggregate(&rows);
    let dir = layout.report_dir();
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();

    let curve: Vec<McCurveRow> = agg
        .iter()
        .map(|a| McCurveRow {
            n_domains: a.n_domains,
            variant: &a.variant,
            n: a.n,
            mcc_mean: a.mcc_mean,
            mcc_std: a.mcc_std,
        })
        .collect();
    let path = dir.join("mcc_vs_domains.csv");
    write_csv(&path, &curve)?;
    written.push(path);

    let domains: BTreeSet<usize> = agg.iter().map(|a| a.n_domains).collect();
    for &d in &domains {
        let cols: Vec<&AggregateRow> = agg.iter().filter(|a| a.n_domains == d).collect();
        let path = dir.join(format!("table_d{d}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["metric".to_string()];
        for c in &cols {
            header.push(format!("{}_mean", c.variant));
            header.push(format!("{}_std", c.variant));
        }
        w.write_record(&header)?;
        for m in METRICS {
            let mut rec = vec![m.to_string()];
            for c in &cols {
                let (mean, std) = metric(c, m);
                rec.push(mean.to_string());
                rec.push(std.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(path);
    }

    let find = |d: usize, v: Variant| agg.iter().find(|a| a.n_domains == d && a.variant == v.as_str());
    let mut penalty = Vec::new();
    for &d in &domains {
        if let (Some(l1), Some(l2)) = (find(d, Variant::Cgvae), find(d, Variant::CgvaeL2)) {
            for m in METRICS {
                let (l1_mean, l1_std) = metric(l1, m);
                let (l2_mean, l2_std) = metric(l2, m);
                penalty.push(PenaltyRow {
                    n_domains: d,
                    metric: m,
                    l1_mean,
                    l1_std,
                    l2_mean,
                    l2_std,
                });
            }
        }
    }
    let path = dir.join("l1_vs_l2.csv");
    if penalty.is_empty() {
        fs::write(&path, "n_domains,metric,l1_mean,l1_std,l2_mean,l2_std\n")?;
    } else {
        write_csv(&path, &penalty)?;
    }
    written.push(path);
    Ok(written)
}
