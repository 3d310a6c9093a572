//! Structural and behavioural invariants of the policy model family.

mod common;

use candle_core::{DType, Device, Tensor, D};
use common::*;
use icr_policy::corpus::{Split, Task};
use icr_policy::encoders::backbone::{Backbone, ResNet50Backbone, RESNET50_PARAMS};
use icr_policy::encoders::text::TextEmbedder;
use icr_policy::model::batch::Batch;
use icr_policy::model::{ModelConfig, ModelForwardCtx, PolicyModel, Variant};
use icr_policy::training::{bce_with_logits_sum, compute_loss};
use std::sync::Arc;

fn device() -> Device {
    Device::Cpu
}

fn forward_eval(model: &PolicyModel, batch: &Batch) -> icr_policy::model::BatchOutput {
    let mut ctx = ModelForwardCtx::eval();
    model.forward(batch, &mut ctx).unwrap()
}

/// Rebuild a batch with the 28 clipart rows permuted by `perm`.
fn permute_batch(batch: &Batch, perm: &[usize], device: &Device, dtype: DType) -> Batch {
    let permute_u32 = |t: &Tensor| -> Tensor {
        let rows = t.to_vec2::<u32>().unwrap();
        let permuted: Vec<u32> = rows
            .iter()
            .flat_map(|row| perm.iter().map(|&p| row[p]).collect::<Vec<_>>())
            .collect();
        Tensor::from_vec(permuted, (rows.len(), perm.len()), device).unwrap()
    };
    let permute_f = |t: &Tensor| -> Tensor {
        let v = t.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap();
        let width = v[0][0].len();
        let permuted: Vec<f64> = v
            .iter()
            .flat_map(|row| {
                perm.iter()
                    .flat_map(|&p| row[p].clone())
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::from_vec(permuted, (v.len(), perm.len(), width), device)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    };
    Batch {
        size: batch.size,
        id_idx: permute_u32(&batch.id_idx),
        orientation: permute_u32(&batch.orientation),
        presence: permute_u32(&batch.presence),
        size_cat: permute_u32(&batch.size_cat),
        face: permute_u32(&batch.face),
        pose: permute_u32(&batch.pose),
        positions: permute_f(&batch.positions),
        text: batch.text.clone(),
        scene_before: batch.scene_before.clone(),
        scene_after: batch.scene_after.clone(),
        gold_actions: batch.gold_actions.as_ref().map(permute_f),
        labels: icr_policy::model::batch::BatchLabels {
            turn_icr: batch.labels.turn_icr.clone(),
            clipart_icr: batch.labels.clipart_icr.clone(),
            actions: permute_f(&batch.labels.actions),
        },
    }
}

#[test]
fn gallery_permutation_equivariance() {
    let dev = device();
    let enc = tiny_text_encoder();
    let records = synthetic_records(Task::When, 3);
    let cfg = tiny_config(Variant::IcrActionTaker, Task::When);
    let model = f64_model(cfg, &dev, None);
    let coll = tiny_collator(&model, Some(&enc), &dev);
    let refs: Vec<_> = records.iter().take(4).collect();
    let batch = coll.collate(&refs).unwrap();

    // a fixed nontrivial permutation of the 28 rows
    let perm: Vec<usize> = (0..28).map(|i| (i * 11 + 5) % 28).collect();
    let permuted = permute_batch(&batch, &perm, &dev, model.dtype());

    let out = forward_eval(&model, &batch);
    let out_p = forward_eval(&model, &permuted);

    // per-clipart outputs permute identically
    let a = out
        .action_logits
        .unwrap()
        .to_vec3::<f64>()
        .unwrap();
    let b = out_p
        .action_logits
        .unwrap()
        .to_vec3::<f64>()
        .unwrap();
    for (row_a, row_b) in a.iter().zip(&b) {
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..5 {
                assert!(
                    (row_a[p][k] - row_b[i][k]).abs() < 1e-8,
                    "action logits must permute with the gallery"
                );
            }
        }
    }
    // the averaged turn-level probability is permutation invariant
    let t_a = out.icr_turn.unwrap().to_vec1::<f64>().unwrap();
    let t_b = out_p.icr_turn.unwrap().to_vec1::<f64>().unwrap();
    for (x, y) in t_a.iter().zip(&t_b) {
        assert!((x - y).abs() < 1e-8, "turn logit must be invariant");
    }
}

#[test]
fn eval_forward_is_deterministic_and_batch_consistent() {
    let dev = device();
    let enc = tiny_text_encoder();
    let records = synthetic_records(Task::When, 4);
    let cfg = tiny_config(Variant::Overhearer, Task::When);
    let model = f64_model(cfg, &dev, None);
    let coll = tiny_collator(&model, Some(&enc), &dev);

    // batch of two identical states gives identical records
    let refs = vec![&records[0], &records[0]];
    let batch = coll.collate(&refs).unwrap();
    let preds = model.predict(&batch).unwrap();
    assert_eq!(preds[0], preds[1]);

    // repeated eval calls are identical
    let again = model.predict(&batch).unwrap();
    assert_eq!(preds, again);
}

#[test]
fn variant_head_contracts_hold_on_forward_outputs() {
    let dev = device();
    let enc = tiny_text_encoder();
    let records = synthetic_records(Task::When, 5);
    let refs: Vec<_> = records.iter().take(3).collect();

    let overhearer = f64_model(tiny_config(Variant::Overhearer, Task::When), &dev, None);
    let coll = tiny_collator(&overhearer, Some(&enc), &dev);
    let batch = coll.collate(&refs).unwrap();
    let preds = overhearer.predict(&batch).unwrap();
    for p in &preds {
        assert!(p.action_logits.is_none(), "overhearer emits no action fields");
        assert!(p.icr_turn_logit.is_some());
        assert!(p.icr_clipart_logits.is_none());
    }

    let action_taker = f64_model(tiny_config(Variant::ActionTaker, Task::When), &dev, None);
    let coll = tiny_collator(&action_taker, Some(&enc), &dev);
    let batch = coll.collate(&refs).unwrap();
    let preds = action_taker.predict(&batch).unwrap();
    for p in &preds {
        assert!(p.icr_turn_logit.is_none(), "action taker emits no iCR fields");
        assert!(p.icr_clipart_logits.is_none());
        let logits = p.action_logits.as_ref().unwrap();
        assert_eq!(logits.len(), 28);
        assert!(logits.iter().flatten().all(|v| v.is_finite()));
    }

    // what-task joint model: clipart-level iCR plus actions
    let what_records = synthetic_records(Task::What, 5);
    let refs: Vec<_> = what_records.iter().take(2).collect();
    let taker = f64_model(tiny_config(Variant::IcrActionTaker, Task::What), &dev, None);
    let coll = tiny_collator(&taker, Some(&enc), &dev);
    let batch = coll.collate(&refs).unwrap();
    let preds = taker.predict(&batch).unwrap();
    for p in &preds {
        assert!(p.icr_turn_logit.is_none());
        assert_eq!(p.icr_clipart_logits.as_ref().unwrap().len(), 28);
        assert!(p.action_logits.is_some());
    }

    // probabilities are the sigmoid of the logits, hence rank-preserving
    let p = &preds[0];
    let logits = p.icr_clipart_logits.as_ref().unwrap();
    let probs = p.icr_clipart_probabilities().unwrap();
    for (z, pr) in logits.iter().zip(&probs) {
        assert!((pr - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }
    let mut rank_z: Vec<usize> = (0..logits.len()).collect();
    rank_z.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    let mut rank_p: Vec<usize> = (0..probs.len()).collect();
    rank_p.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    assert_eq!(rank_z, rank_p);
}

#[test]
fn gallery_only_model_runs_without_memory() {
    let dev = device();
    let records = synthetic_records(Task::When, 6);
    let mut cfg = tiny_config(Variant::Overhearer, Task::When);
    cfg.use_dialogue = false;
    let model = f64_model(cfg, &dev, None);
    let coll = tiny_collator(&model, None, &dev);
    let refs: Vec<_> = records.iter().take(3).collect();
    let batch = coll.collate(&refs).unwrap();
    let preds = model.predict(&batch).unwrap();
    assert!(preds.iter().all(|p| p.icr_turn_logit.unwrap().is_finite()));
}

#[test]
fn zero_position_vector_exposes_the_projection_bias() {
    let dev = device();
    let records = synthetic_records(Task::When, 7);
    let cfg = tiny_config(Variant::Overhearer, Task::When);
    let d = cfg.d_model;
    let model = f64_model(cfg, &dev, None);
    let enc = tiny_text_encoder();
    let coll = tiny_collator(&model, Some(&enc), &dev);
    // find a record with at least one absent clipart (zero position vector)
    let record = records
        .iter()
        .find(|r| r.gallery_before.cliparts().iter().any(|c| !c.present))
        .unwrap();
    let absent_row = record
        .gallery_before
        .cliparts()
        .iter()
        .position(|c| !c.present)
        .unwrap();
    let batch = coll.collate(&[record]).unwrap();
    let emb = model.embed_gallery(&batch).unwrap();
    let slice = emb
        .narrow(1, absent_row, 1)
        .unwrap()
        .narrow(D::Minus1, d - 30, 30)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let bias = model.params().vars()["gallery.position.bias"]
        .as_tensor()
        .to_vec1::<f64>()
        .unwrap();
    for (a, b) in slice.iter().zip(&bias) {
        assert!((a - b).abs() < 1e-12, "zero position must map to the bias image");
    }
}

#[test]
fn gold_action_info_enters_only_through_its_weight_slice() {
    let dev = device();
    let what_records = synthetic_records(Task::What, 8);
    let mut cfg = tiny_config(Variant::Overhearer, Task::What);
    cfg.use_gold_actions = true;
    let d = cfg.d_model;
    let model = f64_model(cfg, &dev, None);
    let enc = tiny_text_encoder();
    let coll = tiny_collator(&model, Some(&enc), &dev);
    // build a batch whose gold-action info is entirely zero
    let record = what_records
        .iter()
        .find(|r| r.actions.rows().iter().all(|a| !a.acted_upon))
        .cloned()
        .unwrap_or_else(|| {
            let mut r = what_records[0].clone();
            r.gallery_after = r.gallery_before.clone();
            r.actions = icr_policy::action_labeler::derive_actions(
                &r.gallery_before,
                &r.gallery_after,
            )
            .unwrap();
            r
        });
    let batch = coll.collate(&[&record]).unwrap();
    let out = forward_eval(&model, &batch);
    let full = out.icr_clipart.unwrap().to_vec2::<f64>().unwrap();

    // oracle: rebuild the head computation with the action columns removed
    let mut ctx = ModelForwardCtx::eval();
    let gal = model.embed_gallery(&batch).unwrap();
    let (text, mask) = batch.text.as_ref().unwrap();
    let proj_w = model.params().vars()["text_proj.weight"].as_tensor();
    let proj_b = model.params().vars()["text_proj.bias"].as_tensor();
    let projected = text
        .broadcast_matmul(&proj_w.t().unwrap())
        .unwrap()
        .broadcast_add(proj_b)
        .unwrap();
    // sinusoidal positions, recomputed here
    let (_, len, dm) = projected.dims3().unwrap();
    let mut pe = vec![0.0f64; len * dm];
    for pos in 0..len {
        for i in 0..dm.div_ceil(2) {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dm as f64);
            pe[pos * dm + 2 * i] = angle.sin();
            if 2 * i + 1 < dm {
                pe[pos * dm + 2 * i + 1] = angle.cos();
            }
        }
    }
    let pe = Tensor::from_vec(pe, (1, len, dm), &dev).unwrap();
    let memory = projected.broadcast_add(&pe).unwrap();
    let bias = ((mask.clone() - 1.0).unwrap() * 1e9).unwrap();
    let (b, s) = bias.dims2().unwrap();
    let bias = bias.reshape((b, 1, 1, s)).unwrap();
    let contextual = model
        .contextualize(&gal, Some((&memory, Some(&bias))), &mut ctx)
        .unwrap();
    // head on [x ; 0] must equal lin2(leaky(W[..d] leaky(x) + b))
    let w1 = model.params().vars()["head.icr.lin1.weight"].as_tensor();
    let b1 = model.params().vars()["head.icr.lin1.bias"].as_tensor();
    let w2 = model.params().vars()["head.icr.lin2.weight"].as_tensor();
    let b2 = model.params().vars()["head.icr.lin2.bias"].as_tensor();
    let w1_x = w1.narrow(1, 0, d).unwrap(); // drop the action-info columns
    let leaky = |x: &Tensor| x.maximum(&(x * 0.01).unwrap()).unwrap();
    let h = leaky(&contextual)
        .broadcast_matmul(&w1_x.t().unwrap())
        .unwrap()
        .broadcast_add(b1)
        .unwrap();
    let z = leaky(&h)
        .broadcast_matmul(&w2.t().unwrap())
        .unwrap()
        .broadcast_add(b2)
        .unwrap()
        .squeeze(D::Minus1)
        .unwrap()
        .to_vec2::<f64>()
        .unwrap();
    for (a, b) in full.iter().flatten().zip(z.iter().flatten()) {
        assert!((a - b).abs() < 1e-9, "zero info must act only via its weight slice");
    }
}

#[test]
fn icr_loss_reaches_action_heads_through_attached_logits() {
    let dev = device();
    let enc = tiny_text_encoder();
    let records = synthetic_records(Task::When, 9);
    let mut cfg = tiny_config(Variant::IcrActionTaker, Task::When);
    cfg.use_action_logits = true;
    cfg.dropout = 0.0;
    let model = f64_model(cfg.clone(), &dev, None);
    let coll = tiny_collator(&model, Some(&enc), &dev);
    let refs: Vec<_> = records.iter().take(4).collect();
    let batch = coll.collate(&refs).unwrap();
    let mut ctx = ModelForwardCtx::train(0.0, 1);
    let out = model.forward(&batch, &mut ctx).unwrap();
    // gradient of the iCR loss alone
    let icr_loss =
        bce_with_logits_sum(out.icr_turn.as_ref().unwrap(), &batch.labels.turn_icr, 2.0).unwrap();
    let grads = icr_loss.backward().unwrap();
    let head_w = model.params().vars()["head.action.add_del.lin1.weight"].as_tensor();
    let g = grads.get(head_w).expect("attached logits carry gradient");
    let nonzero = g
        .abs()
        .unwrap()
        .sum_all()
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!(nonzero > 0.0, "iCR loss must flow into the action heads");

    // with detached logits the same gradient disappears
    let mut detached_cfg = cfg;
    detached_cfg.attach_action_logits = false;
    let model2 = f64_model(detached_cfg, &dev, None);
    let coll2 = tiny_collator(&model2, Some(&enc), &dev);
    let batch2 = coll2.collate(&refs).unwrap();
    let mut ctx = ModelForwardCtx::train(0.0, 1);
    let out2 = model2.forward(&batch2, &mut ctx).unwrap();
    let icr_loss2 =
        bce_with_logits_sum(out2.icr_turn.as_ref().unwrap(), &batch2.labels.turn_icr, 2.0)
            .unwrap();
    let grads2 = icr_loss2.backward().unwrap();
    let head_w2 = model2.params().vars()["head.action.add_del.lin1.weight"].as_tensor();
    assert!(
        grads2.get(head_w2).is_none(),
        "detached logits must not carry gradient"
    );
}

#[test]
fn every_active_head_parameter_receives_gradient() {
    let dev = device();
    let enc = tiny_text_encoder();
    let records = synthetic_records(Task::When, 10);
    let mut cfg = tiny_config(Variant::IcrActionTaker, Task::When);
    cfg.dropout = 0.0;
    let model = f64_model(cfg, &dev, None);
    let coll = tiny_collator(&model, Some(&enc), &dev);
    let mut covered: std::collections::BTreeSet<String> = Default::default();
    for chunk in records.chunks(8).take(3) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = coll.collate(&refs).unwrap();
        let mut ctx = ModelForwardCtx::train(0.0, 2);
        let out = model.forward(&batch, &mut ctx).unwrap();
        let loss = compute_loss(&out, &batch, Task::When, 2.0).unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in model.params().vars() {
            if !name.starts_with("head.") {
                continue;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                let s = g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
                if s > 0.0 {
                    covered.insert(name.clone());
                }
            }
        }
    }
    let head_params: Vec<String> = model
        .params()
        .vars()
        .keys()
        .filter(|n| n.starts_with("head."))
        .cloned()
        .collect();
    for name in &head_params {
        assert!(covered.contains(name), "no gradient ever reached {name}");
    }
}

#[test]
fn paper_scale_parameter_counts_without_scenes() {
    let dev = device();
    // turn-level Overhearer with gallery + dialogue
    let overhearer = ModelConfig {
        variant: Variant::Overhearer,
        task: Task::When,
        ..Default::default()
    };
    let model = PolicyModel::new(overhearer, &dev, DType::F32, None).unwrap();
    assert_eq!(model.num_learnable(), 5_008_923);
    assert_eq!(model.num_total(), 5_008_923);

    // turn-level joint model with gallery + dialogue
    let taker = ModelConfig {
        variant: Variant::IcrActionTaker,
        task: Task::When,
        ..Default::default()
    };
    let model = PolicyModel::new(taker, &dev, DType::F32, None).unwrap();
    assert_eq!(model.num_learnable(), 5_339_168);
}

#[test]
fn paper_scale_parameter_counts_with_scenes() {
    let dev = device();
    let backbone = Arc::new(Backbone::ResNet50(
        ResNet50Backbone::random(1, &dev).unwrap(),
    ));
    assert_eq!(backbone.num_params(), RESNET50_PARAMS);

    let overhearer = ModelConfig {
        variant: Variant::Overhearer,
        task: Task::When,
        use_scene_before: true,
        use_scene_after: true,
        ..Default::default()
    };
    let model = PolicyModel::new(overhearer, &dev, DType::F32, Some(backbone.clone())).unwrap();
    assert_eq!(model.num_learnable(), 5_546_267);
    assert_eq!(model.num_total(), 29_054_299);

    let detecter = ModelConfig {
        variant: Variant::IcrActionDetecter,
        task: Task::When,
        use_scene_before: true,
        use_scene_after: true,
        ..Default::default()
    };
    let model = PolicyModel::new(detecter, &dev, DType::F32, Some(backbone)).unwrap();
    assert_eq!(model.num_learnable(), 5_876_512);
    assert_eq!(model.num_total(), 29_384_544);
}

#[test]
fn head_parameter_count_matches_two_linear_layers() {
    let dev = device();
    let cfg = ModelConfig {
        variant: Variant::ActionTaker,
        task: Task::When,
        ..Default::default()
    };
    let model = PolicyModel::new(cfg.clone(), &dev, DType::F32, None).unwrap();
    let per_head: usize = model
        .params()
        .vars()
        .iter()
        .filter(|(n, _)| n.starts_with("head.action.add_del."))
        .map(|(_, v)| v.as_tensor().elem_count())
        .sum();
    let expected = cfg.d_model * cfg.head_hidden_dim
        + cfg.head_hidden_dim
        + cfg.head_hidden_dim
        + 1;
    assert_eq!(per_head, expected);
}

#[test]
fn scene_model_runs_on_rendered_batches() {
    let dev = device();
    let enc = tiny_text_encoder();
    let records = synthetic_records(Task::When, 11);
    let mut cfg = tiny_config(Variant::IcrActionDetecter, Task::When);
    cfg.use_scene_before = true;
    cfg.use_scene_after = true;
    let model = f64_model(cfg, &dev, Some(tiny_backbone(&dev)));
    let coll = tiny_collator(&model, Some(&enc), &dev);
    let refs: Vec<_> = records.iter().take(2).collect();
    let batch = coll.collate(&refs).unwrap();
    let preds = model.predict(&batch).unwrap();
    assert!(preds[0].icr_turn_logit.unwrap().is_finite());
    assert!(preds[0].action_logits.is_some());
}

#[test]
fn text_encoder_checksum_is_stable_across_use() {
    let enc = tiny_text_encoder();
    let before = enc.checksum();
    let records = synthetic_records(Task::When, 12);
    let dev = device();
    let model = f64_model(tiny_config(Variant::Overhearer, Task::When), &dev, None);
    let coll = tiny_collator(&model, Some(&enc), &dev);
    let refs: Vec<_> = records.iter().take(4).collect();
    let _ = coll.collate(&refs).unwrap();
    assert_eq!(enc.checksum(), before);
}
