use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dislab_core::cgvae::{ModelConfig, PenaltyKind, TrainConfig};
use dislab_core::metrics::EvalOptions;
use dislab_core::synthgen::preset_graph;
use dislab_core::theory::DEFAULT_BLOCK_THRESHOLD;

/// Environment variable that replaces the configured training seeds.
pub const SEED_ENV: &str = "DISLAB_SEED";

/// Model variants compared in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "cgvae")]
    Cgvae,
    /// Sparsity penalty removed.
    #[serde(rename = "cgvae-s")]
    CgvaeS,
    #[serde(rename = "cgvae-l2")]
    CgvaeL2,
    #[serde(rename = "cgvae-fd")]
    CgvaeFd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cgvae, Variant::CgvaeS, Variant::CgvaeL2, Variant::CgvaeFd];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cgvae => "cgvae",
            Variant::CgvaeS => "cgvae-s",
            Variant::CgvaeL2 => "cgvae-l2",
            Variant::CgvaeFd => "cgvae-fd",
        }
    }

    /// The base training config specialised to this variant.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Cgvae => cfg.penalty_kind = PenaltyKind::L1,
            Variant::CgvaeS => {
                cfg.penalty_kind = PenaltyKind::L1;
                cfg.alpha_zero_ablation = true;
                cfg.alpha = 0.0;
            }
            Variant::CgvaeL2 => cfg.penalty_kind = PenaltyKind::L2,
            Variant::CgvaeFd => cfg.penalty_kind = PenaltyKind::FiniteDiff,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .with_context(|| format!("unknown variant `{s}` (expected cgvae, cgvae-s, cgvae-l2 or cgvae-fd)"))
    }
}

/// Network sizes; defaults follow [`ModelConfig::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden: usize,
    pub layers: usize,
    pub flow_units: usize,
    pub slope: f64,
    pub use_mask: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 1);
        Architecture {
            hidden: m.hidden,
            layers: m.layers,
            flow_units: m.flow_units,
            slope: m.slope,
            use_mask: m.use_mask,
        }
    }
}

impl Architecture {
    pub fn model_config(&self, n_obs: usize, n_latent: usize, n_domains: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            layers: self.layers,
            flow_units: self.flow_units,
            slope: self.slope,
            use_mask: self.use_mask,
            ..ModelConfig::new(n_obs, n_latent, n_domains)
        }
    }
}

/// Post-training theory checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryOptions {
    pub block_threshold: f64,
    /// Test rows whose encoded means serve as Jacobian evaluation points.
    pub block_points: usize,
    pub assumption_seed: u64,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        TheoryOptions {
            block_threshold: DEFAULT_BLOCK_THRESHOLD,
            block_points: 200,
            assumption_seed: 7,
        }
    }
}

/// A sweep over domain counts, variants and seeds on one preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub n_domains: Vec<usize>,
    pub n_per_domain: usize,
    /// Seed of the ground-truth mixer, priors and samples.
    pub data_seed: u64,
    /// Training seeds; each one is a separate cell.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub model: Architecture,
    pub eval: EvalOptions,
    pub theory: TheoryOptions,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: "A".into(),
            n_domains: vec![2, 4, 6, 8],
            n_per_domain: 1000,
            data_seed: 0,
            seeds: vec![0, 1, 2],
            variants: vec![Variant::Cgvae, Variant::CgvaeS],
            train: TrainConfig::default(),
            model: Architecture::default(),
            eval: EvalOptions::default(),
            theory: TheoryOptions::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        preset_graph(&self.preset)?;
        if self.n_domains.is_empty() || self.n_domains.contains(&0) {
            bail!("n_domains must be a non-empty list of positive counts");
        }
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.variants.is_empty() {
            bail!("variants must not be empty");
        }
        if self.n_per_domain < 10 {
            bail!("n_per_domain must be at least 10");
        }
        if self.model.layers < 1 || self.model.hidden < 1 || self.model.flow_units < 1 {
            bail!("model sizes must be positive");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Applies the seed environment override.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
            self.seeds = vec![seed];
        }
        Ok(self)
    }

    /// Every (domain count, variant, seed) cell in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &d in &self.n_domains {
            for &variant in &self.variants {
                for &seed in &self.seeds {
                    out.push(Cell {
                        preset: self.preset.clone(),
                        n_domains: d,
                        variant,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub preset: String,
    pub n_domains: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!("{}_d{}_{}_s{}", self.preset, self.n_domains, self.variant, self.seed)
    }

    pub fn data_id(&self) -> String {
        data_id(&self.preset, self.n_domains)
    }

    /// Inverse of [`Cell::run_id`].
    pub fn parse(run_id: &str) -> Option<Cell> {
        let (rest, seed) = run_id.rsplit_once("_s")?;
        let seed = seed.parse().ok()?;
        let (rest, variant) = rest.rsplit_once('_')?;
        let variant = variant.parse().ok()?;
        let (preset, d) = rest.rsplit_once("_d")?;
        Some(Cell {
            preset: preset.to_string(),
            n_domains: d.parse().ok()?,
            variant,
            seed,
        })
    }
}

pub fn data_id(preset: &str, n_domains: usize) -> String {
    format!("{preset}_d{n_domains}")
}

/// Output directory layout.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self, preset: &str, n_domains: usize) -> PathBuf {
        self.root.join("data").join(data_id(preset, n_domains))
    }

    pub fn run_dir(&self, cell: &Cell) -> PathBuf {
        self.root.join("runs").join(cell.run_id())
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn aggregates_csv(&self) -> PathBuf {
        self.root.join("metrics_summary.csv")
    }

    pub fn theory_report(&self) -> PathBuf {
        self.root.join("theory_report.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn failures(&self) -> PathBuf {
        self.root.join("failures.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_round_trips() {
        for variant in Variant::ALL {
            let c = Cell {
                preset: "full".into(),
                n_domains: 8,
                variant,
                seed: 12,
            };
            assert_eq!(Cell::parse(&c.run_id()), Some(c));
        }
    }

    #[test]
    fn ablation_zeroes_alpha() {
        let cfg = Variant::CgvaeS.apply(&TrainConfig::default());
        assert_eq!(cfg.effective_alpha(), 0.0);
        assert_eq!(Variant::CgvaeL2.apply(&TrainConfig::default()).penalty_kind, PenaltyKind::L2);
    }

    #[test]
    fn defaults_validate_and_serialise() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.cells().len(), 4 * 2 * 3);
    }
}
