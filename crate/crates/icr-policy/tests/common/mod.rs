//! Shared test helpers: brute-force metric oracles (independent of the
//! library implementations) and tiny model/corpus builders.

#![allow(dead_code)]

use std::sync::Arc;

use candle_core::{DType, Device};
use icr_policy::corpus::{build_turn_records, GameStateInput, Task};
use icr_policy::encoders::backbone::{Backbone, TinyConvBackbone};
use icr_policy::encoders::text::HashedTextEncoder;
use icr_policy::fixtures::synthetic_corpus;
use icr_policy::model::batch::Collator;
use icr_policy::model::{ModelConfig, PolicyModel, Variant};

// ---------------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------------

/// Average precision via explicit threshold enumeration: for every unique
/// score threshold, compute precision and recall from scratch, then sum the
/// precision-weighted recall increments in descending-threshold order.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    assert!(total_pos > 0.0, "oracle needs positives");
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let mut tp = 0.0;
        let mut pred_pos = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                pred_pos += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let precision = tp / pred_pos;
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// F1 scores from an explicitly built confusion matrix.
pub fn f1_oracle(probabilities: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let mut counts = [[0.0f64; 2]; 2]; // [pred][actual]
    for (&p, &l) in probabilities.iter().zip(labels) {
        counts[(p >= threshold) as usize][l as usize] += 1.0;
    }
    let f1_for = |positive: usize| {
        let tp = counts[positive][positive];
        let fp = counts[positive][1 - positive];
        let fn_ = counts[1 - positive][positive];
        if 2.0 * tp + fp + fn_ == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    let bf1 = f1_for(1);
    (bf1, (bf1 + f1_for(0)) / 2.0)
}

/// KS statistic by exhaustive evaluation of both ECDFs at every sample
/// point of the merged samples.
pub fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut points: Vec<f64> = a.iter().chain(b).cloned().collect();
    points.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let ecdf = |sample: &[f64], x: f64| {
        sample.iter().filter(|&&v| v <= x).count() as f64 / sample.len() as f64
    };
    points
        .iter()
        .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
        .fold(0.0, f64::max)
}

/// Margin by the literal two-class definition |P(pos) - P(neg)|.
pub fn margin_oracle(p: f64) -> f64 {
    (p - (1.0 - p)).abs()
}

// ---------------------------------------------------------------------------
// Tiny builders
// ---------------------------------------------------------------------------

/// Narrow but structurally complete model configuration for fast tests.
pub fn tiny_config(variant: Variant, task: Task) -> ModelConfig {
    ModelConfig {
        variant,
        task,
        d_model: 128,
        n_heads: 8,
        n_layers: 2,
        feedforward_dim: 64,
        head_hidden_dim: 32,
        dropout: 0.1,
        text_width: 32,
        seed: 7,
        ..Default::default()
    }
}

pub fn tiny_text_encoder() -> HashedTextEncoder {
    HashedTextEncoder::new(32, 7)
}

pub fn tiny_backbone(device: &Device) -> Arc<Backbone> {
    Arc::new(Backbone::Tiny(TinyConvBackbone::new(7, device).unwrap()))
}

/// Records from the seeded synthetic corpus.
pub fn synthetic_records(task: Task, seed: u64) -> Vec<GameStateInput> {
    let corpus = synthetic_corpus([6, 2, 2], 6, seed);
    build_turn_records(&corpus.games, &corpus.annotations, task).unwrap()
}

pub fn by_split(
    records: &[GameStateInput],
    split: icr_policy::corpus::Split,
) -> Vec<GameStateInput> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// Collator over the tiny text encoder; scenes render at 64 pixels.
pub fn tiny_collator<'a>(
    model: &'a PolicyModel,
    text: Option<&'a HashedTextEncoder>,
    device: &'a Device,
) -> Collator<'a> {
    Collator {
        cfg: model.config(),
        text_encoder: text.map(|t| t as &dyn icr_policy::encoders::text::TextEmbedder),
        context_length: 1,
        render_resolution: 64,
        assets: None,
        device,
        dtype: model.dtype(),
    }
}

pub fn f64_model(cfg: ModelConfig, device: &Device, backbone: Option<Arc<Backbone>>) -> PolicyModel {
    PolicyModel::new(cfg, device, DType::F64, backbone).unwrap()
}
