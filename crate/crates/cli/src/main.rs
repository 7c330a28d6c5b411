use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use dislab_cli::data::gen_data;
use dislab_cli::eval::eval_all;
use dislab_cli::report::write_report;
use dislab_cli::theory::check_theory;
use dislab_cli::train::train_all;
use dislab_cli::{record_failures, ExperimentConfig, Failure, Layout, Variant};

/// Synthetic identifiability experiments with a sparse-mixing VAE.
#[derive(Parser)]
#[command(name = "dislab", version)]
struct Cli {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite datasets and retrain finished cells.
    #[arg(long, global = true)]
    force: bool,
    /// Restrict the sweep to these variants (cgvae, cgvae-s, cgvae-l2, cgvae-fd).
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Vec<Variant>,
    /// Training seeds, comma separated; overrides the config and DISLAB_SEED.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Worker threads for independent cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one dataset per domain count.
    GenData,
    /// Train every (domain count, variant, seed) cell.
    Train,
    /// Score trained cells into metrics.csv.
    Eval,
    /// Write theory_report.json.
    CheckTheory,
    /// Derive figure and table CSVs from metrics.csv.
    Report,
    /// gen-data, train, eval, check-theory and report in sequence.
    All,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .with_env_seed()?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if !cli.variant.is_empty() {
        cfg.variants = cli.variant.clone();
    }
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_step(step: &Command, cfg: &ExperimentConfig, layout: &Layout, cli: &Cli) -> Result<Vec<Failure>> {
    match step {
        Command::GenData => {
            for r in gen_data(cfg, layout, cli.force)? {
                println!("{} {} {}", r.id, r.digest, if r.written { "written" } else { "unchanged" });
            }
            Ok(Vec::new())
        }
        Command::Train => {
            let s = train_all(cfg, layout, cli.force, cli.jobs)?;
            println!("trained {}, up to date {}, failed {}", s.trained.len(), s.skipped.len(), s.failures.len());
            Ok(s.failures)
        }
        Command::Eval => {
            let s = eval_all(cfg, layout, cli.jobs)?;
            for a in &s.aggregates {
                println!("d={} {:<9} mcc {:.3} ± {:.3} (n={})", a.n_domains, a.variant, a.mcc_mean, a.mcc_std, a.n);
            }
            Ok(s.failures)
        }
        Command::CheckTheory => {
            let (report, failures) = check_theory(cfg, layout)?;
            for d in &report.domains {
                let req: Vec<usize> = d.latents.iter().map(|l| l.required_domains).collect();
                println!(
                    "{}: required domains {:?}, subspace-identifiable subsets {}, component-identifiable latents {:?}",
                    d.data_id,
                    req,
                    d.subspace_identifiable.len(),
                    d.component_identifiable
                );
                for b in &d.blocks {
                    println!("  {}: {} failing pairs", b.run_id, b.report.failed);
                }
            }
            Ok(failures)
        }
        Command::Report => {
            for p in write_report(layout)? {
                println!("{}", p.display());
            }
            Ok(Vec::new())
        }
        Command::All => {
            let mut failures = Vec::new();
            for s in [Command::GenData, Command::Train, Command::Eval, Command::CheckTheory, Command::Report] {
                failures.extend(run_step(&s, cfg, layout, cli)?);
            }
            Ok(failures)
        }
    }
}

fn name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::CheckTheory => "check-theory",
        Command::Report => "report",
        Command::All => "all",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| {
        let layout = Layout::new(&cfg.out);
        let failures = run_step(&cli.command, &cfg, &layout, &cli)?;
        record_failures(&layout, name(&cli.command), &failures)?;
        Ok((failures, layout))
    });
    match result {
        Ok((failures, _)) if failures.is_empty() => ExitCode::SUCCESS,
        Ok((failures, layout)) => {
            for f in &failures {
                eprintln!("failed {} [{}]: {}", f.cell, f.stage, f.error);
            }
            eprintln!("{} failure(s); see {}", failures.len(), layout.failures().display());
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
