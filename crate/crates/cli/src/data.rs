use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dislab_core::synthgen::{preset_dataset, DatasetBundle};

use crate::config::{data_id, ExperimentConfig, Layout};
use crate::dir_is_nonempty;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DataRecord {
    pub id: String,
    pub dir: PathBuf,
    pub digest: String,
    /// False when an identical dataset was already on disk.
    pub written: bool,
}

/// Generates one dataset per configured domain count. An existing
/// directory holding the same dataset is left untouched; anything else
/// there is replaced only with `force`.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<Vec<DataRecord>> {
    let mut out = Vec::new();
    for &d in &cfg.n_domains {
        let bundle = preset_dataset(&cfg.preset, d, cfg.n_per_domain, cfg.data_seed)?;
        let digest = bundle.digest();
        let dir = layout.data_dir(&cfg.preset, d);
        let id = data_id(&cfg.preset, d);
        if dir_is_nonempty(&dir) {
            let existing = DatasetBundle::load(&dir).map(|b| b.digest());
            match existing {
                Ok(found) if found == digest => {
                    out.push(DataRecord {
                        id,
                        dir,
                        digest,
                        written: false,
                    });
                    continue;
                }
                _ if force => fs::remove_dir_all(&dir)?,
                Ok(_) => bail!("{} holds a different dataset; pass --force to overwrite", dir.display()),
                Err(e) => bail!("{} is not a readable dataset ({e}); pass --force to overwrite", dir.display()),
            }
        }
        bundle.save(&dir).with_context(|| format!("writing {}", dir.display()))?;
        out.push(DataRecord {
            id,
            dir,
            digest,
            written: true,
        });
    }
    Ok(out)
}

pub fn load_dataset(layout: &Layout, preset: &str, n_domains: usize) -> Result<DatasetBundle> {
    let dir = layout.data_dir(preset, n_domains);
    DatasetBundle::load(&dir).with_context(|| format!("loading dataset {} (run gen-data first)", dir.display()))
}
