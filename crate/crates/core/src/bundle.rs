//! Array bundles on disk: `manifest.json` maps each array name to its shape
//! and a raw little-endian f32 blob; `meta.json` holds everything else.
//! Navigator checkpoints, PCA bases, VAE weights and pair datasets all use
//! this layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::groupvae::{PairDataset, PairedSample, VaeParams, VaeSpec};
use crate::latent::PcaBasis;
use crate::losses::PrototypeBank;
use crate::navigator::NavigatorParams;
use crate::toyworld::ToyWorldSpec;
use crate::trainer::{TrainConfig, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const META: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named f32 arrays, kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub arrays: BTreeMap<String, Array>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
        && !name.starts_with('.')
}

impl Bundle {
    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::InvalidArgument(format!("bad array name {name:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "array {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays.get(name).ok_or_else(|| Error::Format {
            path: name.into(),
            reason: "array missing from bundle".into(),
        })
    }

    /// Array data after checking its shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let a = self.get(name)?;
        if a.shape != shape {
            return Err(Error::Format {
                path: name.into(),
                reason: format!("shape {:?}, expected {:?}", a.shape, shape),
            });
        }
        Ok(a.data.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = BTreeMap::new();
        for (name, a) in &self.arrays {
            let file = format!("{name}.f32");
            let bytes: Vec<u8> = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    shape: a.shape.clone(),
                    dtype: "f32le".into(),
                    file,
                    byte_length: bytes.len(),
                },
            );
        }
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: BTreeMap<String, ManifestEntry> = read_json(&manifest_path)?;
        let mut bundle = Bundle::default();
        for (name, entry) in manifest {
            let bad = |reason: String| Error::Format {
                path: manifest_path.clone(),
                reason: format!("array {name}: {reason}"),
            };
            if entry.dtype != "f32le" {
                return Err(bad(format!("unsupported dtype {}", entry.dtype)));
            }
            if !valid_name(&entry.file) {
                return Err(bad(format!("bad file name {:?}", entry.file)));
            }
            let count: usize = entry.shape.iter().product();
            if entry.byte_length != 4 * count {
                return Err(bad(format!(
                    "byte_length {} does not match shape {:?}",
                    entry.byte_length, entry.shape
                )));
            }
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != entry.byte_length {
                return Err(bad(format!(
                    "blob holds {} bytes, manifest says {}",
                    bytes.len(),
                    entry.byte_length
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            bundle.insert(&name, &entry.shape, data).map_err(|e| bad(e.to_string()))?;
        }
        Ok(bundle)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidArgument("RNG seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamMeta {
    pub cfg: AdamConfig,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub world: ToyWorldSpec,
    pub config: TrainConfig,
    pub step: u64,
    pub pca_sample_count: usize,
    pub rng: RngState,
    pub adam_v_sub: AdamMeta,
    pub adam_logits: AdamMeta,
    pub adam_prototypes: Option<AdamMeta>,
}

fn basis_into(b: &mut Bundle, basis: &PcaBasis) -> Result<()> {
    let n = basis.dim;
    b.insert("pca.components", &[n, n], basis.components.clone())?;
    b.insert("pca.eigenvalues", &[n], basis.eigenvalues.clone())?;
    b.insert("pca.mean", &[n], basis.mean.clone())
}

fn basis_from(b: &Bundle, sample_count: usize) -> Result<PcaBasis> {
    let n = b.get("pca.mean")?.shape.first().copied().unwrap_or(0);
    Ok(PcaBasis {
        dim: n,
        components: b.take("pca.components", &[n, n])?,
        eigenvalues: b.take("pca.eigenvalues", &[n])?,
        mean: b.take("pca.mean", &[n])?,
        sample_count,
    })
}

fn adam_into(b: &mut Bundle, name: &str, adam: &Adam) -> Result<AdamMeta> {
    b.insert(&format!("adam.{name}.m"), &[adam.m.len()], adam.m.clone())?;
    b.insert(&format!("adam.{name}.v"), &[adam.v.len()], adam.v.clone())?;
    Ok(AdamMeta {
        cfg: adam.cfg,
        t: adam.t,
    })
}

fn adam_from(b: &Bundle, name: &str, meta: &AdamMeta, len: usize) -> Result<Adam> {
    Ok(Adam {
        cfg: meta.cfg,
        m: b.take(&format!("adam.{name}.m"), &[len])?,
        v: b.take(&format!("adam.{name}.v"), &[len])?,
        t: meta.t,
    })
}

/// Writes the full training state.
pub fn save_checkpoint(dir: &Path, state: &TrainState, world: &ToyWorldSpec) -> Result<()> {
    let mut b = Bundle::default();
    let p = &state.params;
    b.insert("navigator.v_sub", &[p.m, p.k], p.v_sub.clone())?;
    b.insert("navigator.att_logits", &[p.m, p.k_layers], p.att_logits.clone())?;
    basis_into(&mut b, &state.basis)?;
    if let Some(bank) = &state.bank {
        b.insert("prototypes", &[bank.m, bank.size, bank.size, 3], bank.patterns.clone())?;
    }
    let meta = CheckpointMeta {
        world: world.clone(),
        config: state.config.clone(),
        step: state.step,
        pca_sample_count: state.basis.sample_count,
        rng: RngState::capture(&state.rng),
        adam_v_sub: adam_into(&mut b, "v_sub", &state.adam_v_sub)?,
        adam_logits: adam_into(&mut b, "att_logits", &state.adam_logits)?,
        adam_prototypes: match &state.adam_prototypes {
            Some(a) => Some(adam_into(&mut b, "prototypes", a)?),
            None => None,
        },
    };
    b.save(dir)?;
    write_json(&dir.join(META), &meta)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, ToyWorldSpec)> {
    let meta: CheckpointMeta = read_json(&dir.join(META))?;
    let b = Bundle::load(dir)?;
    let (m, k) = (meta.config.m, meta.config.k);
    let layers = meta.world.k_layers;
    let params = NavigatorParams {
        m,
        k,
        k_layers: layers,
        v_sub: b.take("navigator.v_sub", &[m, k])?,
        att_logits: b.take("navigator.att_logits", &[m, layers])?,
    };
    let size = meta.world.image_size;
    let bank = match &meta.adam_prototypes {
        Some(_) => Some(PrototypeBank {
            m,
            size,
            patterns: b.take("prototypes", &[m, size, size, 3])?,
        }),
        None => None,
    };
    let adam_prototypes = match (&meta.adam_prototypes, &bank) {
        (Some(a), Some(bank)) => Some(adam_from(&b, "prototypes", a, bank.patterns.len())?),
        _ => None,
    };
    let state = TrainState {
        step: meta.step,
        basis: basis_from(&b, meta.pca_sample_count)?,
        adam_v_sub: adam_from(&b, "v_sub", &meta.adam_v_sub, m * k)?,
        adam_logits: adam_from(&b, "att_logits", &meta.adam_logits, m * layers)?,
        adam_prototypes,
        params,
        bank,
        rng: meta.rng.restore()?,
        config: meta.config,
    };
    Ok((state, meta.world))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisMeta {
    pub world: ToyWorldSpec,
    pub sample_count: usize,
}

pub fn save_basis(dir: &Path, basis: &PcaBasis, world: &ToyWorldSpec) -> Result<()> {
    let mut b = Bundle::default();
    basis_into(&mut b, basis)?;
    b.save(dir)?;
    write_json(
        &dir.join(META),
        &BasisMeta {
            world: world.clone(),
            sample_count: basis.sample_count,
        },
    )
}

pub fn load_basis(dir: &Path) -> Result<(PcaBasis, ToyWorldSpec)> {
    let meta: BasisMeta = read_json(&dir.join(META))?;
    let basis = basis_from(&Bundle::load(dir)?, meta.sample_count)?;
    Ok((basis, meta.world))
}

pub fn save_vae(dir: &Path, params: &VaeParams) -> Result<()> {
    let mut b = Bundle::default();
    for ((name, shape), t) in params.spec.tensor_shapes().into_iter().zip(&params.tensors) {
        b.insert(&format!("vae.{name}"), &shape, t.clone())?;
    }
    b.save(dir)?;
    write_json(&dir.join(META), &params.spec)
}

pub fn load_vae(dir: &Path) -> Result<VaeParams> {
    let spec: VaeSpec = read_json(&dir.join(META))?;
    spec.validate()?;
    let b = Bundle::load(dir)?;
    let tensors = spec
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| b.take(&format!("vae.{name}"), &shape))
        .collect::<Result<Vec<_>>>()?;
    VaeParams::from_tensors(spec, tensors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub image_size: usize,
    pub directions: usize,
}

/// Pair images as `[N, s, s, 3]` arrays and varied indices as f32.
pub fn save_dataset(dir: &Path, ds: &PairDataset) -> Result<()> {
    let (n, s) = (ds.samples.len(), ds.image_size);
    let mut b = Bundle::default();
    b.insert(
        "images_a",
        &[n, s, s, 3],
        ds.samples.iter().flat_map(|p| p.image_a.iter().copied()).collect(),
    )?;
    b.insert(
        "images_b",
        &[n, s, s, 3],
        ds.samples.iter().flat_map(|p| p.image_b.iter().copied()).collect(),
    )?;
    b.insert("varied", &[n], ds.samples.iter().map(|p| p.varied as f32).collect())?;
    b.save(dir)?;
    write_json(
        &dir.join(META),
        &DatasetMeta {
            image_size: s,
            directions: ds.directions,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<PairDataset> {
    let meta: DatasetMeta = read_json(&dir.join(META))?;
    let b = Bundle::load(dir)?;
    let n = b.get("varied")?.shape.first().copied().unwrap_or(0);
    let s = meta.image_size;
    let len = s * s * 3;
    let a = b.take("images_a", &[n, s, s, 3])?;
    let bb = b.take("images_b", &[n, s, s, 3])?;
    let varied = b.take("varied", &[n])?;
    let samples = (0..n)
        .map(|i| PairedSample {
            image_a: a[i * len..(i + 1) * len].to_vec(),
            image_b: bb[i * len..(i + 1) * len].to_vec(),
            varied: varied[i] as usize,
        })
        .collect();
    Ok(PairDataset {
        image_size: s,
        directions: meta.directions,
        samples,
    })
}
