use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CgvaeModel, InputScaling, ModelConfig, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "model.json";
const BLOB: &str = "params.f64le";

/// A trained model plus the context needed to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CgvaeModel,
    pub train_config: Option<TrainConfig>,
    pub dataset_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    scaling: InputScaling,
    train: Option<TrainConfig>,
    dataset_digest: Option<String>,
    params: Vec<ParamEntry>,
    n_values: usize,
    params_sha256: String,
}

impl Checkpoint {
    /// Writes `model.json` and `params.f64le` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let names = self.model.param_names();
        let params = self.model.params();
        let mut blob = Vec::new();
        for p in &params {
            for v in p.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_FORMAT_VERSION,
            model: self.model.config.clone(),
            scaling: self.model.scaling.clone(),
            train: self.train_config.clone(),
            dataset_digest: self.dataset_digest.clone(),
            params: names
                .into_iter()
                .zip(&params)
                .map(|(name, p)| ParamEntry {
                    name,
                    shape: p.shape().to_vec(),
                })
                .collect(),
            n_values: blob.len() / 8,
            params_sha256: hex::encode(Sha256::digest(&blob)),
        };
        fs::write(dir.join(BLOB), &blob)?;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(&mpath, format!("unreadable manifest: {e}")))?;
        if manifest.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_FORMAT_VERSION,
                found: manifest.version,
            });
        }
        let bpath = dir.join(BLOB);
        let blob = fs::read(&bpath)?;
        if blob.len() != manifest.n_values * 8 {
            return Err(Error::corrupt(
                &bpath,
                format!("expected {} bytes, found {} (truncated?)", manifest.n_values * 8, blob.len()),
            ));
        }
        let found = hex::encode(Sha256::digest(&blob));
        if found != manifest.params_sha256 {
            return Err(Error::DigestMismatch {
                what: BLOB.into(),
                expected: manifest.params_sha256,
                found,
            });
        }
        let mut model = CgvaeModel::new(manifest.model.clone(), 0)?;
        let n_obs = model.config.n_obs;
        if manifest.scaling.shift.len() != n_obs || manifest.scaling.scale.len() != n_obs {
            return Err(Error::corrupt(&mpath, "input scaling does not match the model config"));
        }
        model.scaling = manifest.scaling;
        let names = model.param_names();
        if names.len() != manifest.params.len() {
            return Err(Error::corrupt(&mpath, "parameter list does not match the model config"));
        }
        let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for ((p, name), entry) in model.params_mut().into_iter().zip(&names).zip(&manifest.params) {
            if &entry.name != name || p.shape() != entry.shape.as_slice() {
                return Err(Error::corrupt(&mpath, format!("parameter `{}` does not match the model config", entry.name)));
            }
            for v in p.data_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(Checkpoint {
            model,
            train_config: manifest.train,
            dataset_digest: manifest.dataset_digest,
        })
    }
}
