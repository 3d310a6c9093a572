//! The policy model family: gallery embedder, Transformer-decoder
//! contextualiser and classifier heads.
//!
//! Dimension ledger for the gallery embedder: identity `d_model - 100`,
//! orientation 10, presence 10, size 10, face 20, pose 20, plus a linear map
//! of the five positional numbers to 30 dimensions; the widths always sum to
//! `d_model`. The identity embedding has 59 rows (58 inventory classes plus
//! one reserved row). Memory order is `[dialogue tokens; scene before; scene
//! after]`: text carries sinusoidal positions after its projection, scene
//! grids carry learned row/column embeddings shared between the two scenes.

pub mod attention;
pub mod batch;
pub mod params;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Conv2d, Embedding, Linear, Module};
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::encoders::backbone::Backbone;
use crate::error::{Error, Result};
use crate::INVENTORY_SIZE;
use attention::{dropout, Decoder, ForwardCtx, Head};
use batch::Batch;
use params::{Init, ParamStore};

/// Embedding row counts for the categorical gallery features.
pub const ID_ROWS: usize = INVENTORY_SIZE + 1;
pub const ORIENTATION_ROWS: usize = 3;
pub const PRESENCE_ROWS: usize = 2;
pub const SIZE_ROWS: usize = 4;
pub const FACE_ROWS: usize = 6;
pub const POSE_ROWS: usize = 8;

/// Width of the gold-action / action-logit vector appended to the iCR head
/// input: the four concrete actions, meta excluded.
pub const ACTION_INFO_WIDTH: usize = 4;

/// Side length of the learned scene position tables.
pub const MAX_GRID: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Overhearer,
    ActionTaker,
    IcrActionTaker,
    IcrActionDetecter,
}

impl Variant {
    pub fn has_action_heads(self) -> bool {
        !matches!(self, Variant::Overhearer)
    }

    pub fn has_icr_head(self) -> bool {
        !matches!(self, Variant::ActionTaker)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "overhearer" => Variant::Overhearer,
            "action_taker" => Variant::ActionTaker,
            "icr_action_taker" => Variant::IcrActionTaker,
            "icr_action_detecter" => Variant::IcrActionDetecter,
            other => return Err(Error::config(format!("unknown variant `{other}`"))),
        })
    }
}

/// Full model configuration; the defaults are the selected hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub task: Task,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub feedforward_dim: usize,
    pub head_hidden_dim: usize,
    pub dropout: f64,
    pub use_dialogue: bool,
    pub use_scene_before: bool,
    pub use_scene_after: bool,
    pub use_gold_actions: bool,
    pub use_action_logits: bool,
    /// Keep the gradient path from the iCR loss into the action heads when
    /// their logits feed the iCR head.
    pub attach_action_logits: bool,
    /// Mask padded memory positions inside cross-attention (padding
    /// embeddings are zeroed either way).
    pub mask_padding: bool,
    /// Width of the frozen text embedder output.
    pub text_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Overhearer,
            task: Task::When,
            d_model: 256,
            n_heads: 16,
            n_layers: 3,
            feedforward_dim: 2048,
            head_hidden_dim: 256,
            dropout: 0.1,
            use_dialogue: true,
            use_scene_before: false,
            use_scene_after: false,
            use_gold_actions: false,
            use_action_logits: false,
            attach_action_logits: true,
            mask_padding: true,
            text_width: 768,
            seed: 12345,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(format!("model config: {msg}")));
        if self.d_model <= 100 {
            return fail("d_model must exceed 100 so the identity embedding keeps >= 1 dim");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if (self.use_scene_before || self.use_scene_after) && self.d_model % 2 != 0 {
            return fail("scene inputs need an even d_model for the row/column embeddings");
        }
        if self.use_gold_actions && self.use_action_logits {
            return fail("gold actions and action logits are mutually exclusive inputs");
        }
        if self.use_scene_after && !self.use_scene_before {
            return fail("the after-scene input requires the before-scene input");
        }
        match self.variant {
            Variant::Overhearer => {
                if self.use_action_logits {
                    return fail("an overhearer has no action heads to produce logits");
                }
            }
            Variant::ActionTaker => {
                if self.use_gold_actions || self.use_action_logits {
                    return fail("an action taker has no iCR head consuming action inputs");
                }
            }
            Variant::IcrActionTaker => {
                if self.use_scene_after {
                    return fail("the after-scene input turns a taker into a detecter");
                }
            }
            Variant::IcrActionDetecter => {
                if !(self.use_scene_before && self.use_scene_after) {
                    return fail("a detecter requires both scene inputs");
                }
            }
        }
        Ok(())
    }

    pub fn has_memory(&self) -> bool {
        self.use_dialogue || self.use_scene_before || self.use_scene_after
    }

    /// Row label in the style of the results tables, e.g. `G, D, S_b`.
    pub fn input_flags(&self) -> String {
        let mut flags = vec!["G"];
        if self.use_dialogue {
            flags.push("D");
        }
        if self.use_scene_before {
            flags.push("S_b");
        }
        if self.use_scene_after {
            flags.push("S_a");
        }
        if self.use_gold_actions {
            flags.push("A");
        }
        if self.use_action_logits {
            flags.push("L_A");
        }
        flags.join(", ")
    }

    pub fn variant_label(&self) -> &'static str {
        match self.variant {
            Variant::Overhearer => "Overhearer",
            Variant::ActionTaker => {
                if self.use_scene_after {
                    "Action-Detecter"
                } else {
                    "Action-Taker"
                }
            }
            Variant::IcrActionTaker => "iCR-Action-Taker",
            Variant::IcrActionDetecter => "iCR-Action-Detecter",
        }
    }

    fn icr_head_in_dim(&self) -> usize {
        let extra = if self.use_gold_actions || self.use_action_logits {
            ACTION_INFO_WIDTH
        } else {
            0
        };
        self.d_model + extra
    }
}

/// Model outputs for one decision point. Probability fields are the sigmoid
/// of the logits; fields are absent exactly when the variant lacks the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub action_logits: Option<Vec<[f64; 5]>>,
    pub icr_turn_logit: Option<f64>,
    pub icr_clipart_logits: Option<Vec<f64>>,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl PredictionRecord {
    pub fn icr_turn_probability(&self) -> Option<f64> {
        self.icr_turn_logit.map(sigmoid)
    }

    pub fn icr_clipart_probabilities(&self) -> Option<Vec<f64>> {
        self.icr_clipart_logits
            .as_ref()
            .map(|v| v.iter().copied().map(sigmoid).collect())
    }

    pub fn action_probabilities(&self) -> Option<Vec<[f64; 5]>> {
        self.action_logits
            .as_ref()
            .map(|rows| rows.iter().map(|r| r.map(sigmoid)).collect())
    }
}

/// Raw batched outputs; tensors stay on the model device.
pub struct BatchOutput {
    pub action_logits: Option<Tensor>,
    pub icr_turn: Option<Tensor>,
    pub icr_clipart: Option<Tensor>,
}

struct GalleryEmbedder {
    id: Embedding,
    orientation: Embedding,
    presence: Embedding,
    size: Embedding,
    face: Embedding,
    pose: Embedding,
    position: Linear,
}

impl GalleryEmbedder {
    fn new(store: &mut ParamStore, d_model: usize) -> Result<Self> {
        Ok(GalleryEmbedder {
            id: store.embedding("gallery.id", ID_ROWS, d_model - 100)?,
            orientation: store.embedding("gallery.orientation", ORIENTATION_ROWS, 10)?,
            presence: store.embedding("gallery.presence", PRESENCE_ROWS, 10)?,
            size: store.embedding("gallery.size", SIZE_ROWS, 10)?,
            face: store.embedding("gallery.face", FACE_ROWS, 20)?,
            pose: store.embedding("gallery.pose", POSE_ROWS, 20)?,
            position: store.linear("gallery.position", 5, 30)?,
        })
    }

    fn forward(&self, batch: &Batch) -> Result<Tensor> {
        let parts = [
            self.id.forward(&batch.id_idx)?,
            self.orientation.forward(&batch.orientation)?,
            self.presence.forward(&batch.presence)?,
            self.size.forward(&batch.size_cat)?,
            self.face.forward(&batch.face)?,
            self.pose.forward(&batch.pose)?,
            self.position.forward(&batch.positions)?,
        ];
        Ok(Tensor::cat(&parts, D::Minus1)?)
    }
}

struct SceneNeck {
    reduce: Conv2d,
    pos_row: Tensor,
    pos_col: Tensor,
}

impl SceneNeck {
    fn new(store: &mut ParamStore, channels: usize, d_model: usize) -> Result<Self> {
        Ok(SceneNeck {
            reduce: store.conv1x1("scene.reduce", channels, d_model)?,
            pos_row: store.tensor(
                "scene.pos_row",
                &[MAX_GRID, d_model / 2],
                Init::Normal { std: 0.02 },
            )?,
            pos_col: store.tensor(
                "scene.pos_col",
                &[MAX_GRID, d_model / 2],
                Init::Normal { std: 0.02 },
            )?,
        })
    }

    /// `[B, C, h, w]` features to `[B, h*w, d]` with positions added.
    fn forward(&self, features: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let x = self.reduce.forward(features)?;
        let (b, d, h, w) = x.dims4()?;
        if h > MAX_GRID || w > MAX_GRID {
            return Err(Error::Model(format!(
                "scene grid {h}x{w} exceeds the {MAX_GRID}-position tables"
            )));
        }
        let col = self.pos_col.narrow(0, 0, w)?; // [w, d/2]
        let row = self.pos_row.narrow(0, 0, h)?; // [h, d/2]
        let col = col.unsqueeze(0)?.expand((h, w, d / 2))?;
        let row = row.unsqueeze(1)?.expand((h, w, d / 2))?;
        let pos = Tensor::cat(&[col, row], D::Minus1)?.reshape((h * w, d))?;
        let x = x.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?;
        let x = x.broadcast_add(&pos.unsqueeze(0)?)?;
        dropout(&x, ctx)
    }
}

fn sinusoidal_positions(
    len: usize,
    d_model: usize,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = vec![0.0f64; len * d_model];
    for pos in 0..len {
        for i in 0..d_model.div_ceil(2) {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            if 2 * i + 1 < d_model {
                data[pos * d_model + 2 * i + 1] = angle.cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (len, d_model), device)?.to_dtype(dtype)?)
}

/// One policy model instance: trainable parameters plus the frozen backbone.
pub struct PolicyModel {
    cfg: ModelConfig,
    store: ParamStore,
    gallery: GalleryEmbedder,
    text_proj: Option<Linear>,
    scene_neck: Option<SceneNeck>,
    decoder: Decoder,
    action_heads: Option<Vec<Head>>,
    icr_head: Option<Head>,
    backbone: Option<Arc<Backbone>>,
}

/// Names of the five action heads, in the canonical column order.
pub const ACTION_HEAD_NAMES: [&str; 5] = ["add_del", "move", "flip", "resize", "any"];

impl PolicyModel {
    pub fn new(
        cfg: ModelConfig,
        device: &Device,
        dtype: DType,
        backbone: Option<Arc<Backbone>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.use_dialogue && cfg.text_width == 0 {
            return Err(Error::config("text_width must be positive"));
        }
        let needs_backbone = cfg.use_scene_before || cfg.use_scene_after;
        if needs_backbone && backbone.is_none() {
            return Err(Error::config("scene inputs require an image backbone"));
        }
        let mut store = ParamStore::new(device.clone(), dtype, cfg.seed);
        let gallery = GalleryEmbedder::new(&mut store, cfg.d_model)?;
        let text_proj = if cfg.use_dialogue {
            Some(store.linear("text_proj", cfg.text_width, cfg.d_model)?)
        } else {
            None
        };
        let scene_neck = if needs_backbone {
            let channels = backbone.as_ref().unwrap().channels();
            Some(SceneNeck::new(&mut store, channels, cfg.d_model)?)
        } else {
            None
        };
        let decoder = Decoder::new(
            &mut store,
            cfg.d_model,
            cfg.n_heads,
            cfg.n_layers,
            cfg.feedforward_dim,
            cfg.has_memory(),
        )?;
        let action_heads = if cfg.variant.has_action_heads() {
            let mut heads = Vec::with_capacity(5);
            for name in ACTION_HEAD_NAMES {
                heads.push(Head::new(
                    &mut store,
                    &format!("head.action.{name}"),
                    cfg.d_model,
                    cfg.head_hidden_dim,
                )?);
            }
            Some(heads)
        } else {
            None
        };
        let icr_head = if cfg.variant.has_icr_head() {
            Some(Head::new(
                &mut store,
                "head.icr",
                cfg.icr_head_in_dim(),
                cfg.head_hidden_dim,
            )?)
        } else {
            None
        };
        Ok(PolicyModel {
            cfg,
            store,
            gallery,
            text_proj,
            scene_neck,
            decoder,
            action_heads,
            icr_head,
            backbone,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> Option<&Arc<Backbone>> {
        self.backbone.as_ref()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Trainable parameter count.
    pub fn num_learnable(&self) -> usize {
        self.store.num_params()
    }

    /// Total parameter count including the frozen backbone.
    pub fn num_total(&self) -> usize {
        self.num_learnable()
            + self
                .backbone
                .as_ref()
                .map(|b| b.num_params())
                .unwrap_or(0)
    }

    /// Per-clipart embedding of the gallery state: `[B, 28, d_model]`.
    pub fn embed_gallery(&self, batch: &Batch) -> Result<Tensor> {
        let emb = self.gallery.forward(batch)?;
        debug_assert_eq!(emb.dims()[2], self.cfg.d_model);
        Ok(emb)
    }

    fn assemble_memory(
        &self,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<Option<(Tensor, Option<Tensor>)>> {
        let mut segments: Vec<Tensor> = Vec::new();
        let mut masks: Vec<Tensor> = Vec::new();
        if let (Some((emb, mask)), Some(proj)) = (&batch.text, &self.text_proj) {
            let x = proj.forward(emb)?;
            let (_, len, d) = x.dims3()?;
            let pe = sinusoidal_positions(len, d, x.device(), x.dtype())?;
            segments.push(x.broadcast_add(&pe.unsqueeze(0)?)?);
            masks.push(mask.clone());
        }
        if let Some(neck) = &self.scene_neck {
            let backbone = self.backbone.as_ref().expect("backbone checked at build");
            for scene in [&batch.scene_before, &batch.scene_after]
                .into_iter()
                .flatten()
            {
                // the backbone is frozen; cut the graph at its output
                let feats = backbone.forward(scene)?.detach().to_dtype(self.dtype())?;
                let seg = neck.forward(&feats, ctx)?;
                let (b, s, _) = seg.dims3()?;
                masks.push(Tensor::ones((b, s), self.dtype(), self.device())?);
                segments.push(seg);
            }
        }
        if segments.is_empty() {
            return Ok(None);
        }
        let memory = Tensor::cat(&segments, 1)?;
        let mask = if self.cfg.mask_padding {
            let mask = Tensor::cat(&masks, 1)?; // [B, S], 1 keep
            let bias = ((mask - 1.0)? * 1e9)?; // 0 keep, -1e9 drop
            let (b, s) = bias.dims2()?;
            Some(bias.reshape((b, 1, 1, s))?)
        } else {
            None
        };
        Ok(Some((memory, mask)))
    }

    /// Contextualise gallery embeddings against the memory sequence.
    pub fn contextualize(
        &self,
        gallery_emb: &Tensor,
        memory: Option<(&Tensor, Option<&Tensor>)>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        self.decoder.forward(gallery_emb, memory, ctx)
    }

    /// Full forward pass over one batch.
    pub fn forward(&self, batch: &Batch, ctx: &mut ForwardCtx) -> Result<BatchOutput> {
        let gallery_emb = self.embed_gallery(batch)?;
        let memory = self.assemble_memory(batch, ctx)?;
        let mem_ref = memory.as_ref().map(|(m, b)| (m, b.as_ref()));
        let contextual = self.contextualize(&gallery_emb, mem_ref, ctx)?;

        let action_logits = match &self.action_heads {
            Some(heads) => {
                let mut cols = Vec::with_capacity(5);
                for head in heads {
                    cols.push(head.forward(&contextual, ctx)?); // [B,28,1]
                }
                Some(Tensor::cat(&cols, D::Minus1)?) // [B,28,5]
            }
            None => None,
        };

        let (icr_turn, icr_clipart) = match &self.icr_head {
            Some(head) => {
                let action_info: Option<Tensor> = if self.cfg.use_gold_actions {
                    batch.gold_actions.clone()
                } else if self.cfg.use_action_logits {
                    let logits = action_logits
                        .as_ref()
                        .ok_or_else(|| Error::Model("action logits requested but absent".into()))?;
                    let concrete = logits.narrow(D::Minus1, 0, ACTION_INFO_WIDTH)?;
                    Some(if self.cfg.attach_action_logits {
                        concrete
                    } else {
                        concrete.detach()
                    })
                } else {
                    None
                };
                let x = match &action_info {
                    Some(info) => Tensor::cat(&[&contextual, info], D::Minus1)?,
                    None => contextual.clone(),
                };
                match self.cfg.task {
                    Task::When => {
                        let pooled = x.mean(1)?; // [B, d(+4)]
                        let logit = head.forward(&pooled, ctx)?; // [B,1]
                        (Some(logit.squeeze(D::Minus1)?), None)
                    }
                    Task::What => {
                        let logits = head.forward(&x, ctx)?; // [B,28,1]
                        (None, Some(logits.squeeze(D::Minus1)?))
                    }
                }
            }
            None => (None, None),
        };

        Ok(BatchOutput {
            action_logits,
            icr_turn,
            icr_clipart,
        })
    }

    /// Evaluation-mode predictions as plain records.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<PredictionRecord>> {
        let mut ctx = ForwardCtx::eval();
        let out = self.forward(batch, &mut ctx)?;
        let b = batch.size;
        let actions: Option<Vec<Vec<Vec<f64>>>> = match &out.action_logits {
            Some(t) => Some(t.to_dtype(DType::F64)?.to_vec3()?),
            None => None,
        };
        let turn: Option<Vec<f64>> = match &out.icr_turn {
            Some(t) => Some(t.to_dtype(DType::F64)?.to_vec1()?),
            None => None,
        };
        let clipart: Option<Vec<Vec<f64>>> = match &out.icr_clipart {
            Some(t) => Some(t.to_dtype(DType::F64)?.to_vec2()?),
            None => None,
        };
        let mut records = Vec::with_capacity(b);
        for i in 0..b {
            records.push(PredictionRecord {
                action_logits: actions.as_ref().map(|a| {
                    a[i].iter()
                        .map(|row| [row[0], row[1], row[2], row[3], row[4]])
                        .collect()
                }),
                icr_turn_logit: turn.as_ref().map(|t| t[i]),
                icr_clipart_logits: clipart.as_ref().map(|c| c[i].clone()),
            });
        }
        Ok(records)
    }
}

/// Widths of the six categorical embeddings plus the position projection
/// for a given `d_model`; the ledger always sums to `d_model`.
pub fn dimension_ledger(d_model: usize) -> [usize; 7] {
    [d_model - 100, 10, 10, 10, 20, 20, 30]
}

pub use attention::ForwardCtx as ModelForwardCtx;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_sums_to_d_model() {
        for d in [131usize, 144, 256, 512] {
            let ledger = dimension_ledger(d);
            assert_eq!(ledger.iter().sum::<usize>(), d);
        }
        assert_eq!(dimension_ledger(256)[0], 156);
    }

    #[test]
    fn config_validation_enforces_variant_contracts() {
        let mut cfg = ModelConfig {
            variant: Variant::IcrActionTaker,
            use_gold_actions: true,
            use_action_logits: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.use_gold_actions = false;
        assert!(cfg.validate().is_ok());
        cfg.variant = Variant::Overhearer;
        assert!(cfg.validate().is_err()); // overhearer with L_A
        cfg.use_action_logits = false;
        cfg.variant = Variant::IcrActionDetecter;
        assert!(cfg.validate().is_err()); // detecter without scenes
        cfg.use_scene_before = true;
        cfg.use_scene_after = true;
        assert!(cfg.validate().is_ok());
        cfg.variant = Variant::ActionTaker;
        cfg.use_scene_after = false;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.variant_label(), "Action-Taker");
        cfg.use_scene_after = true;
        assert_eq!(cfg.variant_label(), "Action-Detecter");
    }

    #[test]
    fn input_flags_render_like_the_result_tables() {
        let cfg = ModelConfig {
            variant: Variant::IcrActionDetecter,
            use_scene_before: true,
            use_scene_after: true,
            use_action_logits: true,
            ..Default::default()
        };
        assert_eq!(cfg.input_flags(), "G, D, S_b, S_a, L_A");
        let g_only = ModelConfig {
            use_dialogue: false,
            ..Default::default()
        };
        assert_eq!(g_only.input_flags(), "G");
    }
}
