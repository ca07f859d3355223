//! Weights and the manifest + blob on-disk container.
//!
//! The manifest is UTF-8 JSON with the config, a tensor table
//! (`name`, `dtype`, `shape`, `offset`, `length` in bytes) and the SHA-256 of
//! the blob. The blob is raw little-endian scalars, row-major, in table order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: Tensor<T>,
    /// `[n_heads, d_model, d_head]`
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// `[n_heads, d_head, d_model]`
    pub w_o: Tensor<T>,
    pub ln2: Tensor<T>,
    /// `[d_model, d_mlp]`
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    /// `[d_mlp, d_model]`
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_ln: Tensor<T>,
    pub unembed: Tensor<T>,
}

const BLOCK_TENSORS: [&str; 9] = [
    "ln1.w",
    "attn.W_Q",
    "attn.W_K",
    "attn.W_V",
    "attn.W_O",
    "ln2.w",
    "mlp.W_gate",
    "mlp.W_up",
    "mlp.W_down",
];

/// Canonical tensor names and shapes, in blob order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h, dh, m, v) = (
        config.d_model,
        config.n_heads,
        config.d_head,
        config.d_mlp,
        config.vocab_size,
    );
    let mut out = vec![("embed.W_E".to_string(), vec![v, d])];
    for l in 0..config.n_layers {
        let shapes = [
            vec![d],
            vec![h, d, dh],
            vec![h, d, dh],
            vec![h, d, dh],
            vec![h, dh, d],
            vec![d],
            vec![d, m],
            vec![d, m],
            vec![m, d],
        ];
        for (name, shape) in BLOCK_TENSORS.iter().zip(shapes) {
            out.push((format!("blocks.{l}.{name}"), shape));
        }
    }
    out.push(("final_ln.w".to_string(), vec![d]));
    out.push(("unembed.W_U".to_string(), vec![d, v]));
    out
}

impl<T: Scalar> BlockParams<T> {
    fn slot(&self, i: usize) -> &Tensor<T> {
        [
            &self.ln1,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ][i]
    }
}

impl<T: Scalar> Params<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut layout = tensor_layout(config).into_iter().map(|(_, s)| Tensor::zeros(&s));
        Self::from_ordered(config, &mut layout)
    }

    fn from_ordered(config: &ModelConfig, it: &mut impl Iterator<Item = Tensor<T>>) -> Self {
        let mut next = || it.next().expect("layout length");
        let embed = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        Params {
            embed,
            blocks,
            final_ln: next(),
            unembed: next(),
        }
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embed];
        for b in &self.blocks {
            out.extend((0..BLOCK_TENSORS.len()).map(|i| b.slot(i)));
        }
        out.push(&self.final_ln);
        out.push(&self.unembed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            let BlockParams {
                ln1,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2,
                w_gate,
                w_up,
                w_down,
            } = b;
            out.extend([ln1, w_q, w_k, w_v, w_o, ln2, w_gate, w_up, w_down]);
        }
        out.push(&mut self.final_ln);
        out.push(&mut self.unembed);
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        let idx = self.index_of(name)?;
        Some(self.tensors()[idx])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let idx = self.index_of(name)?;
        self.tensors_mut().into_iter().nth(idx)
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        match name {
            "embed.W_E" => return Some(0),
            "final_ln.w" => return Some(1 + self.blocks.len() * BLOCK_TENSORS.len()),
            "unembed.W_U" => return Some(2 + self.blocks.len() * BLOCK_TENSORS.len()),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.")?;
        let (layer, field) = rest.split_once('.')?;
        let layer: usize = layer.parse().ok()?;
        if layer >= self.blocks.len() {
            return None;
        }
        let slot = BLOCK_TENSORS.iter().position(|&f| f == field)?;
        Some(1 + layer * BLOCK_TENSORS.len() + slot)
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            embed: self.embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: b.ln1.cast(),
                    w_q: b.w_q.cast(),
                    w_k: b.w_k.cast(),
                    w_v: b.w_v.cast(),
                    w_o: b.w_o.cast(),
                    ln2: b.ln2.cast(),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            final_ln: self.final_ln.cast(),
            unembed: self.unembed.cast(),
        }
    }
}

/// A model: config plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let ckpt = Self { config, params };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Gaussian init: projections scaled by `1/sqrt(fan_in)`, norms at one.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&config);
        let layout = tensor_layout(&config);
        for ((name, shape), t) in layout.iter().zip(params.tensors_mut()) {
            if name.ends_with(".w") {
                t.data_mut().fill(T::one());
                continue;
            }
            let fan_in = match name.as_str() {
                "embed.W_E" => 1,
                _ if name.ends_with("W_O") => shape[1] * shape[0],
                _ if shape.len() == 3 => shape[1],
                _ => shape[0],
            };
            let std = if name == "embed.W_E" {
                1.0
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in t.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Self::new(config, params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.blocks.len() != self.config.n_layers {
            return Err(Error::Load {
                name: "blocks".into(),
                reason: format!(
                    "{} blocks for {} layers",
                    self.params.blocks.len(),
                    self.config.n_layers
                ),
            });
        }
        for ((name, shape), t) in tensor_layout(&self.config).iter().zip(self.params.tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: format!("shape {:?} does not match declared {:?}", t.shape(), shape),
                });
            }
            if !t.all_finite() {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: "non-finite values".into(),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        tensor_layout(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.tensors())
            .collect()
    }

    /// Serialized blob bytes in canonical order.
    pub fn blob_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.config.parameter_count() * T::DTYPE.size_of());
        for t in self.params.tensors() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Writes `<manifest>` and a sibling blob (`<stem>.bin`). Returns both paths.
    pub fn save(&self, manifest_path: &Path) -> Result<(PathBuf, PathBuf)> {
        let blob = self.blob_bytes();
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        let blob_name = format!("{stem}.bin");
        let blob_path = manifest_path.with_file_name(&blob_name);
        let mut offset = 0u64;
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let length = (t.len() * T::DTYPE.size_of()) as u64;
                let e = TensorEntry {
                    name,
                    dtype: T::DTYPE,
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            blob: blob_name,
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            tensors,
        };
        if let Some(dir) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))?;
        Ok((manifest_path.to_path_buf(), blob_path))
    }
}

fn decode<T: Scalar, S: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::DTYPE.size_of())
        .map(|b| T::of(S::read_le(b).as_f64()))
        .collect()
}

/// Loads a checkpoint, converting stored scalars to `T`.
pub fn load_checkpoint<T: Scalar>(manifest_path: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Load {
            name: "manifest".into(),
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    manifest.config.validate()?;
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.blob_sha256 {
        return Err(Error::Load {
            name: manifest.blob.clone(),
            reason: format!(
                "checksum mismatch ({} bytes, sha256 {digest}, expected {})",
                blob.len(),
                manifest.blob_sha256
            ),
        });
    }
    let layout = tensor_layout(&manifest.config);
    let mut loaded = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Load {
                name: name.clone(),
                reason: "missing from tensor table".into(),
            })?;
        if &entry.shape != shape {
            return Err(Error::Load {
                name: name.clone(),
                reason: format!("shape {:?} does not match declared {:?}", entry.shape, shape),
            });
        }
        let n: usize = shape.iter().product();
        let expect_len = (n * entry.dtype.size_of()) as u64;
        let end = entry.offset.checked_add(entry.length);
        if entry.length != expect_len || end.is_none_or(|e| e > blob.len() as u64) {
            return Err(Error::Load {
                name: name.clone(),
                reason: format!(
                    "byte range {}+{} invalid for blob of {} bytes",
                    entry.offset,
                    entry.length,
                    blob.len()
                ),
            });
        }
        let bytes = &blob[entry.offset as usize..(entry.offset + entry.length) as usize];
        let data = match entry.dtype {
            DType::F32 => decode::<T, f32>(bytes),
            DType::F64 => decode::<T, f64>(bytes),
        };
        loaded.push(Tensor::new(shape.clone(), data)?);
    }
    let params = Params::from_ordered(&manifest.config, &mut loaded.into_iter());
    Checkpoint::new(manifest.config, params)
}
