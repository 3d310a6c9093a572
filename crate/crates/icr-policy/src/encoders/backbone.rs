//! Frozen convolutional image backbones.
//!
//! [`TinyConvBackbone`] is the download-free fallback: five stride-2
//! convolutions with seeded fixed weights, stride 32 overall. The ResNet-50
//! backbone follows the torchvision layout (bottleneck blocks, no
//! classification head) and can either load real weights from a safetensors
//! file using the torchvision parameter names or run with seeded random
//! weights for structural tests. Backbone parameters are plain tensors;
//! nothing here is trainable.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Spatial reduction factor of both backbones.
pub const BACKBONE_STRIDE: usize = 32;

fn normal_vec(rng: &mut ChaCha20Rng, n: usize, std: f64) -> Vec<f32> {
    // Box-Muller; two uniforms per draw.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push((r * theta.cos() * std) as f32);
        if out.len() < n {
            out.push((r * theta.sin() * std) as f32);
        }
    }
    out
}

fn conv_weight(
    rng: &mut ChaCha20Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    device: &Device,
) -> Result<Tensor> {
    let fan_in = in_c * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let data = normal_vec(rng, out_c * in_c * k * k, std);
    Ok(Tensor::from_vec(data, (out_c, in_c, k, k), device)?)
}

fn checksum_tensors<'a>(tensors: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut entries: Vec<(&String, &Tensor)> = tensors.collect();
    entries.sort_by_key(|(name, _)| (*name).clone());
    for (name, t) in entries {
        hasher.update(name.as_bytes());
        let flat = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for v in flat {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl BatchNorm2d {
    /// Evaluation-mode batch norm over `[B, C, H, W]`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = self.weight.dims1()?;
        let shape = (1, c, 1, 1);
        let mean = self.running_mean.reshape(shape)?;
        let var = self.running_var.reshape(shape)?;
        let w = self.weight.reshape(shape)?;
        let b = self.bias.reshape(shape)?;
        x.broadcast_sub(&mean)?
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&w)?
            .broadcast_add(&b)
    }
}

fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    x.conv2d(weight, padding, stride, 1, 1)
}

/// Five stride-2 convolutions with fixed seeded weights.
pub struct TinyConvBackbone {
    weights: Vec<Tensor>,
    channels: usize,
    seed: u64,
}

/// Output channel count of the tiny backbone.
pub const TINY_CHANNELS: usize = 64;

impl TinyConvBackbone {
    pub fn new(seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7ac0_11e5);
        let plan = [(3, 8), (8, 16), (16, 32), (32, 64), (64, TINY_CHANNELS)];
        let mut weights = Vec::new();
        for (in_c, out_c) in plan {
            weights.push(conv_weight(&mut rng, out_c, in_c, 3, device)?);
        }
        Ok(TinyConvBackbone {
            weights,
            channels: TINY_CHANNELS,
            seed,
        })
    }

    fn forward_impl(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for w in &self.weights {
            h = conv2d(&h, w, 2, 1)?.relu()?;
        }
        Ok(h)
    }
}

/// The clipart-id keyed random palette makes fallback scenes informative
/// enough for smoke training, but the backbone stays interchangeable with
/// ResNet-50 behind this enum.
pub enum Backbone {
    Tiny(TinyConvBackbone),
    ResNet50(ResNet50Backbone),
}

impl Backbone {
    pub fn channels(&self) -> usize {
        match self {
            Backbone::Tiny(b) => b.channels,
            Backbone::ResNet50(_) => 2048,
        }
    }

    pub fn stride(&self) -> usize {
        BACKBONE_STRIDE
    }

    /// `[B, 3, H, W]` f32 images to `[B, C, H/32, W/32]` f32 features.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let out = match self {
            Backbone::Tiny(b) => b.forward_impl(images)?,
            Backbone::ResNet50(b) => b.forward_impl(images)?,
        };
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        match self {
            Backbone::Tiny(b) => b.weights.iter().map(|w| w.elem_count()).sum(),
            Backbone::ResNet50(b) => b.num_params(),
        }
    }

    pub fn checksum(&self) -> Result<String> {
        match self {
            Backbone::Tiny(b) => {
                let named: Vec<(String, Tensor)> = b
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| (format!("conv{i}.weight"), w.clone()))
                    .collect();
                checksum_tensors(named.iter().map(|(n, t)| (n, t)))
            }
            Backbone::ResNet50(b) => checksum_tensors(b.tensors.iter()),
        }
    }

    pub fn identifier(&self) -> String {
        match self {
            Backbone::Tiny(b) => format!("tiny:seed={}", b.seed),
            Backbone::ResNet50(b) => match &b.weights_path {
                Some(p) => format!("resnet50:{}", p.display()),
                None => format!("resnet50:random-seed={}", b.seed),
            },
        }
    }
}

/// Torchvision-layout ResNet-50 without the classification head.
pub struct ResNet50Backbone {
    tensors: HashMap<String, Tensor>,
    weights_path: Option<PathBuf>,
    seed: u64,
}

const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_WIDTH: [usize; 4] = [64, 128, 256, 512];

impl ResNet50Backbone {
    /// Seeded random weights; structure, shapes and parameter count match
    /// the pretrained layout exactly.
    pub fn random(seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5e5e_5050);
        let mut tensors = HashMap::new();
        let add_conv = |name: String,
                            out_c: usize,
                            in_c: usize,
                            k: usize,
                            rng: &mut ChaCha20Rng,
                            tensors: &mut HashMap<String, Tensor>|
         -> Result<()> {
            tensors.insert(name, conv_weight(rng, out_c, in_c, k, device)?);
            Ok(())
        };
        let add_bn = |name: &str, c: usize, tensors: &mut HashMap<String, Tensor>| -> Result<()> {
            tensors.insert(format!("{name}.weight"), Tensor::ones((c,), DType::F32, device)?);
            tensors.insert(format!("{name}.bias"), Tensor::zeros((c,), DType::F32, device)?);
            tensors.insert(
                format!("{name}.running_mean"),
                Tensor::zeros((c,), DType::F32, device)?,
            );
            tensors.insert(
                format!("{name}.running_var"),
                Tensor::ones((c,), DType::F32, device)?,
            );
            Ok(())
        };
        add_conv("conv1.weight".into(), 64, 3, 7, &mut rng, &mut tensors)?;
        add_bn("bn1", 64, &mut tensors)?;
        let mut in_c = 64;
        for (stage, (&blocks, &width)) in STAGE_BLOCKS.iter().zip(&STAGE_WIDTH).enumerate() {
            let out_c = width * 4;
            for block in 0..blocks {
                let p = format!("layer{}.{block}", stage + 1);
                let block_in = if block == 0 { in_c } else { out_c };
                add_conv(format!("{p}.conv1.weight"), width, block_in, 1, &mut rng, &mut tensors)?;
                add_bn(&format!("{p}.bn1"), width, &mut tensors)?;
                add_conv(format!("{p}.conv2.weight"), width, width, 3, &mut rng, &mut tensors)?;
                add_bn(&format!("{p}.bn2"), width, &mut tensors)?;
                add_conv(format!("{p}.conv3.weight"), out_c, width, 1, &mut rng, &mut tensors)?;
                add_bn(&format!("{p}.bn3"), out_c, &mut tensors)?;
                if block == 0 {
                    add_conv(
                        format!("{p}.downsample.0.weight"),
                        out_c,
                        block_in,
                        1,
                        &mut rng,
                        &mut tensors,
                    )?;
                    add_bn(&format!("{p}.downsample.1"), out_c, &mut tensors)?;
                }
            }
            in_c = out_c;
        }
        Ok(ResNet50Backbone {
            tensors,
            weights_path: None,
            seed,
        })
    }

    /// Load pretrained weights (torchvision parameter names) from a
    /// safetensors file. The classification head, if present, is ignored.
    pub fn from_safetensors(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let loaded = candle_core::safetensors::load(path, device)?;
        let mut base = ResNet50Backbone::random(0, device)?;
        for (name, t) in base.tensors.iter_mut() {
            let src = loaded
                .get(name)
                .ok_or_else(|| Error::Model(format!("resnet50 weights lack `{name}`")))?;
            if src.dims() != t.dims() {
                return Err(Error::Model(format!(
                    "resnet50 tensor `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    t.dims()
                )));
            }
            *t = src.to_dtype(DType::F32)?;
        }
        base.weights_path = Some(path.to_path_buf());
        Ok(base)
    }

    fn get(&self, name: &str) -> candle_core::Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| candle_core::Error::Msg(format!("missing tensor {name}")))
    }

    fn bn(&self, name: &str) -> candle_core::Result<BatchNorm2d> {
        Ok(BatchNorm2d {
            weight: self.get(&format!("{name}.weight"))?.clone(),
            bias: self.get(&format!("{name}.bias"))?.clone(),
            running_mean: self.get(&format!("{name}.running_mean"))?.clone(),
            running_var: self.get(&format!("{name}.running_var"))?.clone(),
        })
    }

    fn bottleneck(&self, x: &Tensor, prefix: &str, stride: usize) -> candle_core::Result<Tensor> {
        let identity = if self.tensors.contains_key(&format!("{prefix}.downsample.0.weight")) {
            let d = conv2d(x, self.get(&format!("{prefix}.downsample.0.weight"))?, stride, 0)?;
            self.bn(&format!("{prefix}.downsample.1"))?.forward(&d)?
        } else {
            x.clone()
        };
        let h = conv2d(x, self.get(&format!("{prefix}.conv1.weight"))?, 1, 0)?;
        let h = self.bn(&format!("{prefix}.bn1"))?.forward(&h)?.relu()?;
        let h = conv2d(&h, self.get(&format!("{prefix}.conv2.weight"))?, stride, 1)?;
        let h = self.bn(&format!("{prefix}.bn2"))?.forward(&h)?.relu()?;
        let h = conv2d(&h, self.get(&format!("{prefix}.conv3.weight"))?, 1, 0)?;
        let h = self.bn(&format!("{prefix}.bn3"))?.forward(&h)?;
        (h + identity)?.relu()
    }

    fn forward_impl(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = conv2d(x, self.get("conv1.weight")?, 2, 3)?;
        let h = self.bn("bn1")?.forward(&h)?.relu()?;
        // 3x3 stride-2 max pool with padding 1; activations are
        // non-negative after the relu so zero padding is equivalent.
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut h = h.max_pool2d_with_stride(3, 2)?;
        for (stage, &blocks) in STAGE_BLOCKS.iter().enumerate() {
            for block in 0..blocks {
                let stride = if block == 0 && stage > 0 { 2 } else { 1 };
                h = self.bottleneck(&h, &format!("layer{}.{block}", stage + 1), stride)?;
            }
        }
        Ok(h)
    }

    /// Parameter count excluding the batch-norm running statistics, which
    /// are buffers rather than parameters.
    pub fn num_params(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(name, _)| !name.contains("running_"))
            .map(|(_, t)| t.elem_count())
            .sum()
    }
}

impl Backbone {
    /// Grid side length for a square input resolution.
    pub fn grid_side(&self, resolution: usize) -> usize {
        resolution.div_ceil(BACKBONE_STRIDE)
    }
}

/// Parameter count of the torchvision ResNet-50 trunk (no fc head).
pub const RESNET50_PARAMS: usize = 23_508_032;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_backbone_grid_follows_stride_arithmetic() {
        let dev = Device::Cpu;
        let b = Backbone::Tiny(TinyConvBackbone::new(3, &dev).unwrap());
        let img = Tensor::zeros((1, 3, 224, 224), DType::F32, &dev).unwrap();
        let f = b.forward(&img).unwrap();
        assert_eq!(f.dims(), &[1, TINY_CHANNELS, 7, 7]);
        let img2 = Tensor::zeros((2, 3, 96, 96), DType::F32, &dev).unwrap();
        let f2 = b.forward(&img2).unwrap();
        assert_eq!(f2.dims(), &[2, TINY_CHANNELS, 3, 3]);
    }

    #[test]
    fn tiny_backbone_is_deterministic_and_input_sensitive() {
        let dev = Device::Cpu;
        let b = Backbone::Tiny(TinyConvBackbone::new(3, &dev).unwrap());
        let zero = Tensor::zeros((1, 3, 64, 64), DType::F32, &dev).unwrap();
        let data: Vec<f32> = (0..3 * 64 * 64).map(|i| (i % 7) as f32 * 0.1).collect();
        let img = Tensor::from_vec(data, (1, 3, 64, 64), &dev).unwrap();
        let a = b.forward(&img).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let a2 = b.forward(&img).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, a2);
        let z = b.forward(&zero).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(a, z);
        // same seed, same weights
        let b2 = Backbone::Tiny(TinyConvBackbone::new(3, &dev).unwrap());
        assert_eq!(b.checksum().unwrap(), b2.checksum().unwrap());
    }

    #[test]
    fn resnet50_has_the_torchvision_parameter_count() {
        let dev = Device::Cpu;
        let b = ResNet50Backbone::random(1, &dev).unwrap();
        assert_eq!(b.num_params(), RESNET50_PARAMS);
    }

    #[test]
    fn resnet50_forward_produces_a_2048_channel_grid() {
        let dev = Device::Cpu;
        let b = Backbone::ResNet50(ResNet50Backbone::random(1, &dev).unwrap());
        let img = Tensor::zeros((1, 3, 64, 64), DType::F32, &dev).unwrap();
        let f = b.forward(&img).unwrap();
        assert_eq!(f.dims(), &[1, 2048, 2, 2]);
    }
}
