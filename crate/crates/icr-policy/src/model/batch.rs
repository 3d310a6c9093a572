//! Batching: turn records into the tensors a model consumes.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::ModelConfig;
use crate::action_labeler::ActionKind;
use crate::corpus::GameStateInput;
use crate::encoders::scene::{render_and_preprocess, IMAGENET_NORM};
use crate::encoders::text::TextEmbedder;
use crate::encoders::assemble_dialogue_text;
use crate::error::{Error, Result};
use crate::game_state::Gallery;
use crate::GALLERY_SIZE;

/// Labels of one batch, as tensors for the loss.
pub struct BatchLabels {
    pub turn_icr: Tensor,
    pub clipart_icr: Option<Tensor>,
    pub actions: Tensor,
}

/// One batch of decision points.
pub struct Batch {
    pub size: usize,
    pub id_idx: Tensor,
    pub orientation: Tensor,
    pub presence: Tensor,
    pub size_cat: Tensor,
    pub face: Tensor,
    pub pose: Tensor,
    pub positions: Tensor,
    pub text: Option<(Tensor, Tensor)>,
    pub scene_before: Option<Tensor>,
    pub scene_after: Option<Tensor>,
    pub gold_actions: Option<Tensor>,
    pub labels: BatchLabels,
}

/// Everything needed to turn records into batches.
pub struct Collator<'a> {
    pub cfg: &'a ModelConfig,
    pub text_encoder: Option<&'a dyn TextEmbedder>,
    pub context_length: usize,
    pub render_resolution: u32,
    pub assets: Option<&'a Path>,
    pub device: &'a Device,
    pub dtype: DType,
}

impl<'a> Collator<'a> {
    fn scenes(&self, galleries: &[&Gallery]) -> Result<Tensor> {
        let res = self.render_resolution as usize;
        let mut data = Vec::with_capacity(galleries.len() * 3 * res * res);
        for g in galleries {
            data.extend(render_and_preprocess(
                g,
                self.render_resolution,
                self.assets,
                IMAGENET_NORM,
            )?);
        }
        Ok(Tensor::from_vec(
            data,
            (galleries.len(), 3, res, res),
            self.device,
        )?)
    }

    pub fn collate(&self, records: &[&GameStateInput]) -> Result<Batch> {
        if records.is_empty() {
            return Err(Error::Model("cannot collate an empty batch".into()));
        }
        let b = records.len();
        let mut id_idx = Vec::with_capacity(b * GALLERY_SIZE);
        let mut orientation = Vec::with_capacity(b * GALLERY_SIZE);
        let mut presence = Vec::with_capacity(b * GALLERY_SIZE);
        let mut size_cat = Vec::with_capacity(b * GALLERY_SIZE);
        let mut face = Vec::with_capacity(b * GALLERY_SIZE);
        let mut pose = Vec::with_capacity(b * GALLERY_SIZE);
        let mut positions = Vec::with_capacity(b * GALLERY_SIZE * 5);
        for r in records {
            for c in r.gallery_before.cliparts() {
                // id row 0 is reserved; inventory ids occupy 1..=58
                id_idx.push(c.id.raw() as u32 + 1);
                orientation.push(c.orientation as u32);
                presence.push(c.present as u32);
                size_cat.push(c.size as u32);
                face.push(c.face as u32);
                pose.push(c.pose as u32);
                positions.extend(c.position_features().map(|v| v as f64));
            }
        }
        let dims = (b, GALLERY_SIZE);
        let mk =
            |v: Vec<u32>| -> candle_core::Result<Tensor> { Tensor::from_vec(v, dims, self.device) };
        let positions = Tensor::from_vec(positions, (b, GALLERY_SIZE, 5), self.device)?
            .to_dtype(self.dtype)?;

        let text = if self.cfg.use_dialogue {
            let enc = self
                .text_encoder
                .ok_or_else(|| Error::Model("dialogue input requires a text encoder".into()))?;
            let width = enc.width();
            let mut emb = Vec::new();
            let mut mask = Vec::new();
            let mut len = 0;
            for r in records {
                let window = assemble_dialogue_text(
                    &r.history,
                    r.turn_index,
                    self.context_length,
                    enc.tokenizer(),
                );
                len = window.len();
                emb.extend(enc.embed(&window)?);
                mask.extend(
                    window
                        .attention_mask
                        .iter()
                        .map(|&m| if m { 1.0f32 } else { 0.0 }),
                );
            }
            let emb = Tensor::from_vec(emb, (b, len, width), self.device)?
                .to_dtype(self.dtype)?;
            let mask = Tensor::from_vec(mask, (b, len), self.device)?.to_dtype(self.dtype)?;
            Some((emb, mask))
        } else {
            None
        };

        let scene_before = if self.cfg.use_scene_before {
            let gals: Vec<&Gallery> = records.iter().map(|r| &r.gallery_before).collect();
            Some(self.scenes(&gals)?)
        } else {
            None
        };
        let scene_after = if self.cfg.use_scene_after {
            let gals: Vec<&Gallery> = records.iter().map(|r| &r.gallery_after).collect();
            Some(self.scenes(&gals)?)
        } else {
            None
        };

        let gold_actions = if self.cfg.use_gold_actions {
            let mut data = Vec::with_capacity(b * GALLERY_SIZE * 4);
            for r in records {
                for row in r.actions.rows() {
                    for kind in ActionKind::CONCRETE {
                        data.push(if row.get(kind) { 1.0f64 } else { 0.0 });
                    }
                }
            }
            Some(
                Tensor::from_vec(data, (b, GALLERY_SIZE, 4), self.device)?
                    .to_dtype(self.dtype)?,
            )
        } else {
            None
        };

        let turn_icr = Tensor::from_vec(
            records
                .iter()
                .map(|r| if r.turn_is_icr { 1.0f64 } else { 0.0 })
                .collect::<Vec<_>>(),
            (b,),
            self.device,
        )?
        .to_dtype(self.dtype)?;
        let clipart_icr = if records.iter().all(|r| r.clipart_icr.is_some()) {
            let mut data = Vec::with_capacity(b * GALLERY_SIZE);
            for r in records {
                for &f in r.clipart_icr.as_ref().unwrap() {
                    data.push(if f { 1.0f64 } else { 0.0 });
                }
            }
            Some(
                Tensor::from_vec(data, dims, self.device)?.to_dtype(self.dtype)?,
            )
        } else {
            None
        };
        let mut actions = Vec::with_capacity(b * GALLERY_SIZE * 5);
        for r in records {
            for row in r.actions.rows() {
                for kind in ActionKind::ALL {
                    actions.push(if row.get(kind) { 1.0f64 } else { 0.0 });
                }
            }
        }
        let actions =
            Tensor::from_vec(actions, (b, GALLERY_SIZE, 5), self.device)?.to_dtype(self.dtype)?;

        Ok(Batch {
            size: b,
            id_idx: mk(id_idx)?,
            orientation: mk(orientation)?,
            presence: mk(presence)?,
            size_cat: mk(size_cat)?,
            face: mk(face)?,
            pose: mk(pose)?,
            positions,
            text,
            scene_before,
            scene_after,
            gold_actions,
            labels: BatchLabels {
                turn_icr,
                clipart_icr,
                actions,
            },
        })
    }
}
