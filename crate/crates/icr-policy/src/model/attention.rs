//! Multi-head attention and the decoder stack.
//!
//! The decoder follows the post-norm layout: self-attention over the 28
//! clipart rows (no positional encoding, so row order is immaterial), then
//! cross-attention into the memory sequence, then the feed-forward block,
//! each with residual connection and layer norm. When no memory is
//! configured the cross-attention sublayer is skipped entirely and the
//! model degrades to self-attention only.

use candle_core::{Tensor, D};
use candle_nn::ops::softmax;
use candle_nn::{LayerNorm, Linear, Module};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::params::ParamStore;
use crate::error::Result;

/// Per-forward state: evaluation mode, or training mode with a seeded
/// dropout stream.
pub struct ForwardCtx {
    train: Option<TrainCtx>,
}

struct TrainCtx {
    rng: ChaCha20Rng,
    dropout: f64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { train: None }
    }

    /// Training mode; all dropout masks for this forward/backward pass come
    /// from the given stream.
    pub fn train(dropout: f64, seed: u64) -> Self {
        ForwardCtx {
            train: Some(TrainCtx {
                rng: ChaCha20Rng::seed_from_u64(seed),
                dropout,
            }),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train.is_some()
    }
}

/// Inverted dropout; identity in evaluation mode.
pub fn dropout(x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let Some(tc) = &mut ctx.train else {
        return Ok(x.clone());
    };
    if tc.dropout <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - tc.dropout;
    let n = x.elem_count();
    let mask: Vec<f32> = (0..n)
        .map(|_| {
            if tc.rng.random::<f64>() < keep {
                (1.0 / keep) as f32
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.01)?)?)
}

pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: store.linear(&format!("{name}.q"), d_model, d_model)?,
            k: store.linear(&format!("{name}.k"), d_model, d_model)?,
            v: store.linear(&format!("{name}.v"), d_model, d_model)?,
            o: store.linear(&format!("{name}.o"), d_model, d_model)?,
            n_heads,
        })
    }

    /// `query`: `[B, T, D]`, `kv`: `[B, S, D]`, `key_bias`: additive
    /// `[B, 1, 1, S]` mask (0 keep, large negative drop).
    pub fn forward(
        &self,
        query: &Tensor,
        kv: &Tensor,
        key_bias: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let (b, t, d) = query.dims3()?;
        let (_, s, _) = kv.dims3()?;
        let hd = d / self.n_heads;
        let split = |x: Tensor, len: usize| -> candle_core::Result<Tensor> {
            x.reshape((b, len, self.n_heads, hd))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split(self.q.forward(query)?, t)?;
        let k = split(self.k.forward(kv)?, s)?;
        let v = split(self.v.forward(kv)?, s)?;
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = softmax(&scores, D::Minus1)?;
        let probs = dropout(&probs, ctx)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, t, d))?;
        Ok(self.o.forward(&out)?)
    }
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: Option<MultiHeadAttention>,
    ln1: LayerNorm,
    ln2: Option<LayerNorm>,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl DecoderLayer {
    fn forward(
        &self,
        x: &Tensor,
        memory: Option<(&Tensor, Option<&Tensor>)>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let sa = self.self_attn.forward(x, x, None, ctx)?;
        let x = self.ln1.forward(&(x + dropout(&sa, ctx)?)?)?;
        let x = match (memory, &self.cross_attn, &self.ln2) {
            (Some((mem, bias)), Some(cross), Some(ln2)) => {
                let ca = cross.forward(&x, mem, bias, ctx)?;
                ln2.forward(&(&x + dropout(&ca, ctx)?)?)?
            }
            _ => x,
        };
        let ff = self.ff1.forward(&x)?.relu()?;
        let ff = self.ff2.forward(&dropout(&ff, ctx)?)?;
        Ok(self.ln3.forward(&(&x + dropout(&ff, ctx)?)?)?)
    }
}

/// The decoder-only Transformer stack contextualising the gallery rows.
pub struct Decoder {
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        feedforward_dim: usize,
        with_cross: bool,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("decoder.{l}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d_model, n_heads)?,
                cross_attn: if with_cross {
                    Some(MultiHeadAttention::new(
                        store,
                        &format!("{p}.cross"),
                        d_model,
                        n_heads,
                    )?)
                } else {
                    None
                },
                ln1: store.layer_norm(&format!("{p}.ln1"), d_model)?,
                ln2: if with_cross {
                    Some(store.layer_norm(&format!("{p}.ln2"), d_model)?)
                } else {
                    None
                },
                ln3: store.layer_norm(&format!("{p}.ln3"), d_model)?,
                ff1: store.linear(&format!("{p}.ff1"), d_model, feedforward_dim)?,
                ff2: store.linear(&format!("{p}.ff2"), feedforward_dim, d_model)?,
            });
        }
        Ok(Decoder { layers })
    }

    pub fn forward(
        &self,
        target: &Tensor,
        memory: Option<(&Tensor, Option<&Tensor>)>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let mut x = target.clone();
        for layer in &self.layers {
            x = layer.forward(&x, memory, ctx)?;
        }
        Ok(x)
    }
}

/// Two-layer classifier head: leaky ReLU, dropout, linear, leaky ReLU,
/// linear, producing one logit per input row.
pub struct Head {
    lin1: Linear,
    lin2: Linear,
}

impl Head {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Head {
            lin1: store.linear(&format!("{name}.lin1"), in_dim, hidden)?,
            lin2: store.linear(&format!("{name}.lin2"), hidden, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let x = leaky_relu(x)?;
        let x = dropout(&x, ctx)?;
        let x = self.lin1.forward(&x)?;
        let x = leaky_relu(&x)?;
        Ok(self.lin2.forward(&x)?)
    }
}
