use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};
use crate::synthgen::mixing::MixingSpec;
use crate::synthgen::prior::DomainPrior;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const TRAIN_FRACTION_NUM: usize = 9;
const TRAIN_FRACTION_DEN: usize = 10;

/// Where a bundle came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub preset: Option<String>,
    pub n_per_domain: usize,
    pub sample_seed: u64,
    /// Preset graphs are reproducible stand-ins rather than published graphs.
    pub stand_in_graph: bool,
}

/// Samples `(x, z, u)` with a fixed 90/10 train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub x: Tensor,
    pub z: Tensor,
    pub u: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub spec: MixingSpec,
    pub prior: DomainPrior,
    pub spec_digest: String,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    n_samples: usize,
    n_latent: usize,
    n_obs: usize,
    n_domains: usize,
    spec_digest: String,
    dataset_digest: String,
    blobs: BlobDigests,
    provenance: Provenance,
    train: Vec<usize>,
    test: Vec<usize>,
    spec: MixingSpec,
    prior: DomainPrior,
}

#[derive(Serialize, Deserialize)]
struct BlobDigests {
    x: String,
    z: String,
    u: String,
}

/// Draws `n_per_domain` rows per domain from the factorised Gaussian
/// prior, mixes them, and splits 90/10 with a seeded shuffle.
pub fn sample_dataset(spec: &MixingSpec, prior: &DomainPrior, n_per_domain: usize, seed: u64) -> Result<DatasetBundle> {
    if n_per_domain < 10 {
        return Err(Error::InvalidArgument(format!(
            "n_per_domain must be at least 10, got {n_per_domain}"
        )));
    }
    if prior.n_latent() != spec.n_latent() {
        return Err(Error::shape("sample_dataset", &[prior.n_latent()], &[spec.n_latent()]));
    }
    let n = spec.n_latent();
    let total = n_per_domain * prior.n_domains();
    let mut rng = SeededRng::new(seed);
    let mut z = Vec::with_capacity(total * n);
    let mut u = Vec::with_capacity(total);
    for d in 0..prior.n_domains() {
        for _ in 0..n_per_domain {
            for i in 0..n {
                z.push(prior.mean(d, i) + prior.std(d, i) * rng.normal());
            }
            u.push(d);
        }
    }
    let z = Tensor::matrix(total, n, z)?;
    let x = spec.mix(&z)?;

    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order);
    let n_train = total * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
    let test = order.split_off(n_train);

    Ok(DatasetBundle {
        x,
        z,
        u,
        train: order,
        test,
        spec: spec.clone(),
        prior: prior.clone(),
        spec_digest: spec.digest(),
        provenance: Provenance {
            preset: None,
            n_per_domain,
            sample_seed: seed,
            stand_in_graph: false,
        },
    })
}

fn f64_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u32_bytes(data: &[usize]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as u32).to_le_bytes()).collect()
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.prior.n_domains()
    }

    /// SHA-256 over the arrays, split and generating spec.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"dataset/v1");
        h.update(self.spec_digest.as_bytes());
        h.update(f64_bytes(self.x.data()));
        h.update(f64_bytes(self.z.data()));
        h.update(u32_bytes(&self.u));
        h.update(u32_bytes(&self.train));
        h.update(u32_bytes(&self.test));
        hex::encode(h.finalize())
    }

    pub fn train_x(&self) -> Tensor {
        self.x.select_rows(&self.train)
    }

    pub fn test_x(&self) -> Tensor {
        self.x.select_rows(&self.test)
    }

    pub fn train_z(&self) -> Tensor {
        self.z.select_rows(&self.train)
    }

    pub fn test_z(&self) -> Tensor {
        self.z.select_rows(&self.test)
    }

    /// Writes `meta.json`, `x.f64le`, `z.f64le` and `u.u32le` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (xb, zb, ub) = (f64_bytes(self.x.data()), f64_bytes(self.z.data()), u32_bytes(&self.u));
        let meta = Meta {
            version: DATASET_FORMAT_VERSION,
            n_samples: self.len(),
            n_latent: self.z.cols(),
            n_obs: self.x.cols(),
            n_domains: self.n_domains(),
            spec_digest: self.spec_digest.clone(),
            dataset_digest: self.digest(),
            blobs: BlobDigests {
                x: sha(&xb),
                z: sha(&zb),
                u: sha(&ub),
            },
            provenance: self.provenance.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
            spec: self.spec.clone(),
            prior: self.prior.clone(),
        };
        fs::write(dir.join("x.f64le"), xb)?;
        fs::write(dir.join("z.f64le"), zb)?;
        fs::write(dir.join("u.u32le"), ub)?;
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a bundle back, verifying every recorded digest and shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
        if meta.version != DATASET_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_FORMAT_VERSION,
                found: meta.version,
            });
        }
        let read_blob = |name: &str, expected_len: usize, digest: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            let bytes = fs::read(&path)?;
            if bytes.len() != expected_len {
                return Err(Error::corrupt(
                    &path,
                    format!("expected {expected_len} bytes, found {}", bytes.len()),
                ));
            }
            let found = sha(&bytes);
            if found != digest {
                return Err(Error::DigestMismatch {
                    what: name.to_string(),
                    expected: digest.to_string(),
                    found,
                });
            }
            Ok(bytes)
        };
        let n = meta.n_samples;
        let xb = read_blob("x.f64le", n * meta.n_obs * 8, &meta.blobs.x)?;
        let zb = read_blob("z.f64le", n * meta.n_latent * 8, &meta.blobs.z)?;
        let ub = read_blob("u.u32le", n * 4, &meta.blobs.u)?;
        let to_f64 = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let u: Vec<usize> = ub
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();

        let spec_digest = meta.spec.digest();
        if spec_digest != meta.spec_digest {
            return Err(Error::DigestMismatch {
                what: "mixing spec".into(),
                expected: meta.spec_digest,
                found: spec_digest,
            });
        }
        let mut split: Vec<usize> = meta.train.iter().chain(&meta.test).copied().collect();
        split.sort_unstable();
        if split.len() != n || split.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(Error::corrupt(&meta_path, "train/test split is not a partition"));
        }
        if u.iter().any(|&d| d >= meta.prior.n_domains()) {
            return Err(Error::corrupt(dir.join("u.u32le"), "domain index beyond prior"));
        }

        let bundle = DatasetBundle {
            x: Tensor::matrix(n, meta.n_obs, to_f64(&xb))?,
            z: Tensor::matrix(n, meta.n_latent, to_f64(&zb))?,
            u,
            train: meta.train,
            test: meta.test,
            spec: meta.spec,
            prior: meta.prior,
            spec_digest,
            provenance: meta.provenance,
        };
        let found = bundle.digest();
        if found != meta.dataset_digest {
            return Err(Error::DigestMismatch {
                what: "dataset".into(),
                expected: meta.dataset_digest,
                found,
            });
        }
        Ok(bundle)
    }
}
