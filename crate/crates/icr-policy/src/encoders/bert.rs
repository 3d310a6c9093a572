//! Frozen BERT text encoder for full-scale runs.
//!
//! Loads a local checkpoint directory containing `config.json`,
//! `model.safetensors` (HuggingFace parameter names) and `tokenizer.json`.
//! The speaker symbols map onto the first two unused vocabulary slots
//! (ids 1 and 2), which keeps the checkpoint untouched. All parameters are
//! plain tensors, so no gradient ever reaches them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::softmax;
use sha2::{Digest, Sha256};

use super::text::TextEmbedder;
use super::{DialogueWindow, SpeakerTokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_type_vocab() -> usize {
    2
}

fn default_ln_eps() -> f64 {
    1e-12
}

struct Dense {
    weight: Tensor, // [out, in]
    bias: Tensor,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)
    }
}

struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

struct BertLayer {
    query: Dense,
    key: Dense,
    value: Dense,
    attn_out: Dense,
    attn_ln: LayerNorm,
    intermediate: Dense,
    output: Dense,
    out_ln: LayerNorm,
    n_heads: usize,
}

impl BertLayer {
    fn forward(&self, x: &Tensor, mask_bias: &Tensor) -> candle_core::Result<Tensor> {
        let (len, hidden) = x.dims2()?;
        let head_dim = hidden / self.n_heads;
        let reshape = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((len, self.n_heads, head_dim))?
                .transpose(0, 1)?
                .contiguous()
        };
        let q = reshape(self.query.forward(x)?)?;
        let k = reshape(self.key.forward(x)?)?;
        let v = reshape(self.value.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(1, 2)?)? / (head_dim as f64).sqrt())?;
        let scores = scores.broadcast_add(mask_bias)?;
        let probs = softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(0, 1)?
            .reshape((len, hidden))?;
        let attn = self.attn_ln.forward(&(self.attn_out.forward(&ctx)? + x)?)?;
        let inter = self.intermediate.forward(&attn)?.gelu_erf()?;
        self.out_ln.forward(&(self.output.forward(&inter)? + attn)?)
    }
}

struct BertModel {
    word_embeddings: Tensor,
    position_embeddings: Tensor,
    token_type_embeddings: Tensor,
    emb_ln: LayerNorm,
    layers: Vec<BertLayer>,
    config: BertConfig,
}

impl BertModel {
    fn from_tensors(tensors: &HashMap<String, Tensor>, config: BertConfig) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .get(name)
                .cloned()
                .or_else(|| tensors.get(&format!("bert.{name}")).cloned())
                .ok_or_else(|| Error::Model(format!("checkpoint lacks tensor `{name}`")))
        };
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: get(&format!("{prefix}.weight"))?,
                bias: get(&format!("{prefix}.bias"))?,
                eps: config.layer_norm_eps,
            })
        };
        let dense = |prefix: &str| -> Result<Dense> {
            Ok(Dense {
                weight: get(&format!("{prefix}.weight"))?,
                bias: get(&format!("{prefix}.bias"))?,
            })
        };
        let mut layers = Vec::with_capacity(config.num_hidden_layers);
        for i in 0..config.num_hidden_layers {
            let p = format!("encoder.layer.{i}");
            layers.push(BertLayer {
                query: dense(&format!("{p}.attention.self.query"))?,
                key: dense(&format!("{p}.attention.self.key"))?,
                value: dense(&format!("{p}.attention.self.value"))?,
                attn_out: dense(&format!("{p}.attention.output.dense"))?,
                attn_ln: ln(&format!("{p}.attention.output.LayerNorm"))?,
                intermediate: dense(&format!("{p}.intermediate.dense"))?,
                output: dense(&format!("{p}.output.dense"))?,
                out_ln: ln(&format!("{p}.output.LayerNorm"))?,
                n_heads: config.num_attention_heads,
            });
        }
        Ok(BertModel {
            word_embeddings: get("embeddings.word_embeddings.weight")?,
            position_embeddings: get("embeddings.position_embeddings.weight")?,
            token_type_embeddings: get("embeddings.token_type_embeddings.weight")?,
            emb_ln: ln("embeddings.LayerNorm")?,
            layers,
            config,
        })
    }

    /// Token-level hidden states for one window: `[len, hidden]`.
    fn forward(&self, ids: &[u32], mask: &[bool], device: &Device) -> Result<Tensor> {
        let len = ids.len();
        if len > self.config.max_position_embeddings {
            return Err(Error::Model(format!(
                "window of {len} tokens exceeds the encoder's {} positions",
                self.config.max_position_embeddings
            )));
        }
        let ids_t = Tensor::from_vec(ids.to_vec(), (len,), device)?;
        let words = self.word_embeddings.index_select(&ids_t, 0)?;
        let pos = self.position_embeddings.narrow(0, 0, len)?;
        let type0 = self.token_type_embeddings.narrow(0, 0, 1)?;
        let x = words.add(&pos)?.broadcast_add(&type0)?;
        let x = self.emb_ln.forward(&x)?;
        let bias: Vec<f32> = mask.iter().map(|&m| if m { 0.0 } else { -1e9 }).collect();
        let mask_bias = Tensor::from_vec(bias, (1, 1, len), device)?;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(&h, &mask_bias)?;
        }
        Ok(h)
    }
}

struct BertTokenizer {
    inner: tokenizers::Tokenizer,
}

impl SpeakerTokenizer for BertTokenizer {
    fn encode_text(&self, text: &str) -> Vec<u32> {
        match self.inner.encode(text, false) {
            Ok(enc) => enc.get_ids().to_vec(),
            Err(_) => Vec::new(),
        }
    }
}

/// Frozen BERT text embedder backed by a local checkpoint directory.
pub struct BertTextEncoder {
    model: BertModel,
    tokenizer: BertTokenizer,
    device: Device,
    dir: PathBuf,
    checksum: String,
}

impl BertTextEncoder {
    pub fn from_dir(dir: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        let config_path = dir.join("config.json");
        let config_text = std::fs::read_to_string(&config_path)
            .map_err(|e| Error::io(&config_path, e))?;
        let config: BertConfig = serde_json::from_str(&config_text)?;
        let weights_path = dir.join("model.safetensors");
        let bytes =
            std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let checksum: String = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        let tensors: HashMap<String, Tensor> = tensors
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect::<candle_core::Result<_>>()?;
        let model = BertModel::from_tensors(&tensors, config)?;
        let tok_path = dir.join("tokenizer.json");
        let inner = tokenizers::Tokenizer::from_file(&tok_path)
            .map_err(|e| Error::Model(format!("cannot load {}: {e}", tok_path.display())))?;
        Ok(BertTextEncoder {
            model,
            tokenizer: BertTokenizer { inner },
            device: device.clone(),
            dir: dir.to_path_buf(),
            checksum,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.model.config.hidden_size
    }
}

impl TextEmbedder for BertTextEncoder {
    fn width(&self) -> usize {
        self.model.config.hidden_size
    }

    fn tokenizer(&self) -> &dyn SpeakerTokenizer {
        &self.tokenizer
    }

    fn embed(&self, window: &DialogueWindow) -> Result<Vec<f32>> {
        let hidden = self
            .model
            .forward(&window.token_ids, &window.attention_mask, &self.device)?;
        let mut out = hidden.to_vec2::<f32>()?.concat();
        // zero the padding positions after contextualisation
        let width = self.width();
        for (pos, &m) in window.attention_mask.iter().enumerate() {
            if !m {
                out[pos * width..(pos + 1) * width].fill(0.0);
            }
        }
        Ok(out)
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }

    fn identifier(&self) -> String {
        format!("bert:{}", self.dir.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Build a miniature checkpoint directory with random weights so the
    /// loading path, name mapping and forward pass are exercised without
    /// any real checkpoint.
    fn tiny_bert_dir(dir: &Path) {
        let cfg = serde_json::json!({
            "vocab_size": 40,
            "hidden_size": 8,
            "num_hidden_layers": 1,
            "num_attention_heads": 2,
            "intermediate_size": 16,
            "max_position_embeddings": 32,
            "type_vocab_size": 2,
            "layer_norm_eps": 1e-12,
        });
        std::fs::write(dir.join("config.json"), cfg.to_string()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let dev = Device::Cpu;
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        let mut add = |name: &str, shape: Vec<usize>, rng: &mut ChaCha20Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| (rng.random::<f64>() as f32 - 0.5) * 0.2).collect();
            tensors.insert(
                name.to_string(),
                Tensor::from_vec(data, shape, &dev).unwrap(),
            );
        };
        add("embeddings.word_embeddings.weight", vec![40, 8], &mut rng);
        add("embeddings.position_embeddings.weight", vec![32, 8], &mut rng);
        add("embeddings.token_type_embeddings.weight", vec![2, 8], &mut rng);
        add("embeddings.LayerNorm.weight", vec![8], &mut rng);
        add("embeddings.LayerNorm.bias", vec![8], &mut rng);
        for name in [
            "attention.self.query",
            "attention.self.key",
            "attention.self.value",
            "attention.output.dense",
        ] {
            add(&format!("encoder.layer.0.{name}.weight"), vec![8, 8], &mut rng);
            add(&format!("encoder.layer.0.{name}.bias"), vec![8], &mut rng);
        }
        add("encoder.layer.0.attention.output.LayerNorm.weight", vec![8], &mut rng);
        add("encoder.layer.0.attention.output.LayerNorm.bias", vec![8], &mut rng);
        add("encoder.layer.0.intermediate.dense.weight", vec![16, 8], &mut rng);
        add("encoder.layer.0.intermediate.dense.bias", vec![16], &mut rng);
        add("encoder.layer.0.output.dense.weight", vec![8, 16], &mut rng);
        add("encoder.layer.0.output.dense.bias", vec![8], &mut rng);
        add("encoder.layer.0.output.LayerNorm.weight", vec![8], &mut rng);
        add("encoder.layer.0.output.LayerNorm.bias", vec![8], &mut rng);
        candle_core::safetensors::save(&tensors, dir.join("model.safetensors")).unwrap();
    }

    #[test]
    fn tiny_checkpoint_loads_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bert_dir(dir.path());
        let config: BertConfig = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("config.json")).unwrap(),
        )
        .unwrap();
        let bytes = std::fs::read(dir.path().join("model.safetensors")).unwrap();
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).unwrap();
        let model = BertModel::from_tensors(&tensors, config).unwrap();
        let ids = vec![1u32, 5, 9, 0, 0];
        let mask = vec![true, true, true, false, false];
        let h = model.forward(&ids, &mask, &Device::Cpu).unwrap();
        assert_eq!(h.dims(), &[5, 8]);
        // deterministic eval
        let h2 = model.forward(&ids, &mask, &Device::Cpu).unwrap();
        let a = h.to_vec2::<f32>().unwrap();
        let b = h2.to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        // masked positions do not influence real ones
        let ids3 = vec![1u32, 5, 9, 7, 7];
        let h3 = model.forward(&ids3, &mask, &Device::Cpu).unwrap();
        let c = h3.to_vec2::<f32>().unwrap();
        for (row_a, row_c) in a.iter().zip(&c).take(3) {
            for (x, y) in row_a.iter().zip(row_c) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bert_dir(dir.path());
        let config: BertConfig = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("config.json")).unwrap(),
        )
        .unwrap();
        let bytes = std::fs::read(dir.path().join("model.safetensors")).unwrap();
        let mut tensors =
            candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).unwrap();
        tensors.remove("embeddings.LayerNorm.bias");
        let err = match BertModel::from_tensors(&tensors, config) {
            Err(e) => e,
            Ok(_) => panic!("expected a missing-tensor error"),
        };
        assert!(err.to_string().contains("embeddings.LayerNorm.bias"));
    }
}
