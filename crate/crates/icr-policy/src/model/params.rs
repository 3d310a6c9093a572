//! Named trainable parameters with deterministic initialisation.
//!
//! Every parameter is drawn from its own stream keyed by (seed, name), so
//! initial values do not depend on construction order. Linear layers use
//! fan-in uniform bounds, embeddings are normal(0, 0.02). Checkpoints are
//! safetensors files carrying a string-metadata map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Embedding, LayerNorm, Linear};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform { bound: f64 },
    Normal { std: f64 },
    Zeros,
    Ones,
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType, seed: u64) -> Self {
        ParamStore {
            device,
            dtype,
            seed,
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn draw(&self, name: &str, n: usize, init: Init) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ fnv1a64(name.as_bytes()));
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { bound } => (0..n)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect(),
            Init::Normal { std } => {
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random::<f64>();
                    let r = (-2.0 * u1.ln()).sqrt();
                    let theta = 2.0 * std::f64::consts::PI * u2;
                    out.push(r * theta.cos() * std);
                    if out.len() < n {
                        out.push(r * theta.sin() * std);
                    }
                }
                out
            }
        }
    }

    /// Create a named parameter and return a handle sharing its storage.
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Model(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data = self.draw(name, n, init);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = self.tensor(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Uniform { bound },
        )?;
        let b = self.tensor(&format!("{name}.bias"), &[out_dim], Init::Uniform { bound })?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<Embedding> {
        let w = self.tensor(
            &format!("{name}.weight"),
            &[rows, dim],
            Init::Normal { std: 0.02 },
        )?;
        Ok(Embedding::new(w, dim))
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let w = self.tensor(&format!("{name}.weight"), &[dim], Init::Ones)?;
        let b = self.tensor(&format!("{name}.bias"), &[dim], Init::Zeros)?;
        Ok(LayerNorm::new(w, b, 1e-5))
    }

    pub fn conv1x1(&mut self, name: &str, in_c: usize, out_c: usize) -> Result<Conv2d> {
        let bound = 1.0 / (in_c as f64).sqrt();
        let w = self.tensor(
            &format!("{name}.weight"),
            &[out_c, in_c, 1, 1],
            Init::Uniform { bound },
        )?;
        let b = self.tensor(&format!("{name}.bias"), &[out_c], Init::Uniform { bound })?;
        Ok(Conv2d::new(w, Some(b), Conv2dConfig::default()))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Overwrite parameters whose names exist in `source`; returns the
    /// number of copied tensors.
    pub fn copy_matching(&mut self, source: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in self.vars.iter() {
            if let Some(src) = source.get(name) {
                if src.dims() != var.as_tensor().dims() {
                    return Err(Error::Model(format!(
                        "parameter `{name}` has shape {:?} in the checkpoint, expected {:?}",
                        src.dims(),
                        var.as_tensor().dims()
                    )));
                }
                var.set(&src.to_device(&self.device)?.to_dtype(self.dtype)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Serialize all parameters plus a metadata map into a safetensors file.
    pub fn save(&self, path: impl AsRef<Path>, metadata: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        let mut buffers: Vec<(String, safetensors::Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor();
            let dims = t.dims().to_vec();
            let (dtype, bytes) = match self.dtype {
                DType::F64 => {
                    let data = t.flatten_all()?.to_vec1::<f64>()?;
                    let mut b = Vec::with_capacity(data.len() * 8);
                    for v in data {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                    (safetensors::Dtype::F64, b)
                }
                _ => {
                    let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                    let mut b = Vec::with_capacity(data.len() * 4);
                    for v in data {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                    (safetensors::Dtype::F32, b)
                }
            };
            buffers.push((name.clone(), dtype, dims, bytes));
        }
        let views: Vec<(&str, safetensors::tensor::TensorView)> = buffers
            .iter()
            .map(|(name, dtype, dims, bytes)| {
                safetensors::tensor::TensorView::new(*dtype, dims.clone(), bytes)
                    .map(|v| (name.as_str(), v))
                    .map_err(|e| Error::Model(format!("serializing `{name}`: {e}")))
            })
            .collect::<Result<_>>()?;
        let meta: HashMap<String, String> =
            metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        safetensors::serialize_to_file(views, Some(meta), path)
            .map_err(|e| Error::Model(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

/// Read a checkpoint's tensors and metadata.
pub fn load_checkpoint_file(
    path: impl AsRef<Path>,
    device: &Device,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Model(format!("cannot read {}: {e}", path.display())))?;
    let metadata: BTreeMap<String, String> = meta
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((tensors.into_iter().collect(), metadata))
}
