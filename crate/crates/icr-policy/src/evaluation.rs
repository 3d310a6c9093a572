//! Ranking and threshold metrics, prediction dumps and report generation.
//!
//! Average precision uses the step-wise (non-interpolated) definition with
//! ties grouped by threshold: walking the unique scores in descending
//! order, AP is the sum of precision times the recall increment at each
//! step. Task-2 metrics pool the flattened (turn x 28 cliparts) label set;
//! action metrics pool the four concrete actions and exclude the derived
//! meta label.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action_labeler::ActionKind;
use crate::corpus::{GameStateInput, Task};
use crate::error::{Error, Result};
use crate::model::batch::Collator;
use crate::model::{PolicyModel, PredictionRecord};
use crate::GALLERY_SIZE;

/// Average precision over a score-descending ranking.
///
/// Errors when no positive label is present (the metric is undefined there,
/// and silently returning 0 would corrupt aggregates).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::Metric(
            "average precision is undefined without positive labels".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut i = 0;
    while i < order.len() {
        // group ties: one precision/recall point per unique threshold
        let mut j = i;
        let mut group_tp = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_tp += 1;
            }
            j += 1;
        }
        let prev_recall = tp as f64 / total_pos as f64;
        tp += group_tp;
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / j as f64;
        ap += (recall - prev_recall) * precision;
        i = j;
    }
    Ok(ap)
}

/// Binary F1 of the positive class and macro-average F1 of both classes at
/// the given threshold. Degenerate classes yield a per-class F1 of 0.
pub fn f1_scores(probabilities: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    let mut tn = 0.0;
    for (&p, &l) in probabilities.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    };
    let pos = f1(tp, fp, fn_);
    let neg = f1(tn, fn_, fp);
    (pos, (pos + neg) / 2.0)
}

/// One decision point of a prediction dump: logits plus gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub game_id: String,
    pub turn_index: usize,
    pub turn_icr_label: bool,
    pub clipart_icr_labels: Option<Vec<bool>>,
    pub action_labels: Vec<[bool; 5]>,
    pub icr_turn_logit: Option<f64>,
    pub icr_clipart_logits: Option<Vec<f64>>,
    pub action_logits: Option<Vec<[f64; 5]>>,
}

/// Accumulated predictions over one split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub task: Option<Task>,
    pub rows: Vec<DumpRow>,
}

impl PredictionDump {
    pub fn from_predictions(
        records: &[&GameStateInput],
        predictions: &[PredictionRecord],
        task: Task,
    ) -> Result<Self> {
        if records.len() != predictions.len() {
            return Err(Error::Metric("records/predictions length mismatch".into()));
        }
        let rows = records
            .iter()
            .zip(predictions)
            .map(|(r, p)| DumpRow {
                game_id: r.game_id.clone(),
                turn_index: r.turn_index,
                turn_icr_label: r.turn_is_icr,
                clipart_icr_labels: r.clipart_icr.clone(),
                action_labels: r
                    .actions
                    .rows()
                    .iter()
                    .map(|row| {
                        [
                            row.add_delete,
                            row.moved,
                            row.flipped,
                            row.resized,
                            row.acted_upon,
                        ]
                    })
                    .collect(),
                icr_turn_logit: p.icr_turn_logit,
                icr_clipart_logits: p.icr_clipart_logits.clone(),
                action_logits: p.action_logits.clone(),
            })
            .collect();
        Ok(PredictionDump {
            task: Some(task),
            rows,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Run a model over records in order, accumulating logits batch by batch.
pub fn predict_records(
    model: &PolicyModel,
    collator: &Collator,
    records: &[GameStateInput],
    batch_size: usize,
) -> Result<PredictionDump> {
    let mut predictions = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&GameStateInput> = chunk.iter().collect();
        let batch = collator.collate(&refs)?;
        predictions.extend(model.predict(&batch)?);
    }
    let refs: Vec<&GameStateInput> = records.iter().collect();
    PredictionDump::from_predictions(&refs, &predictions, model.config().task)
}

/// Metric triple for one label family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub ap: f64,
    pub bf1: f64,
    pub mf1: f64,
}

/// One row of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub inputs: String,
    pub task: Task,
    pub icr: Option<MetricTriple>,
    pub actions: Option<MetricTriple>,
}

/// How per-action scores aggregate into one triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionAggregation {
    /// Pool all (turn, clipart, action) scores into one ranking.
    #[default]
    Pooled,
    /// Average the per-action metrics.
    Macro,
}

fn triple(scores: &[f64], labels: &[bool]) -> Result<MetricTriple> {
    let ap = average_precision(scores, labels)?;
    let probs: Vec<f64> = scores.iter().map(|&z| crate::model::sigmoid(z)).collect();
    let (bf1, mf1) = f1_scores(&probs, labels, 0.5);
    Ok(MetricTriple { ap, bf1, mf1 })
}

/// Pool action logits/labels over the four concrete actions (meta excluded).
pub fn action_metrics(dump: &PredictionDump, agg: ActionAggregation) -> Result<MetricTriple> {
    match agg {
        ActionAggregation::Pooled => {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for row in &dump.rows {
                let logits = row
                    .action_logits
                    .as_ref()
                    .ok_or_else(|| Error::Metric("dump has no action logits".into()))?;
                for (clip, lab) in logits.iter().zip(&row.action_labels) {
                    for kind in ActionKind::CONCRETE {
                        scores.push(clip[kind.column()]);
                        labels.push(lab[kind.column()]);
                    }
                }
            }
            triple(&scores, &labels)
        }
        ActionAggregation::Macro => {
            let per = per_action_ap(dump)?;
            let mut sum = MetricTriple {
                ap: 0.0,
                bf1: 0.0,
                mf1: 0.0,
            };
            for kind in ActionKind::CONCRETE {
                let t = per[&kind];
                sum.ap += t.ap / 4.0;
                sum.bf1 += t.bf1 / 4.0;
                sum.mf1 += t.mf1 / 4.0;
            }
            Ok(sum)
        }
    }
}

/// Per-action metric triples over a dump with action logits.
pub fn per_action_ap(dump: &PredictionDump) -> Result<BTreeMap<ActionKind, MetricTriple>> {
    let mut out = BTreeMap::new();
    for kind in ActionKind::ALL {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for row in &dump.rows {
            let logits = row
                .action_logits
                .as_ref()
                .ok_or_else(|| Error::Metric("dump has no action logits".into()))?;
            for (clip, lab) in logits.iter().zip(&row.action_labels) {
                scores.push(clip[kind.column()]);
                labels.push(lab[kind.column()]);
            }
        }
        out.insert(kind, triple(&scores, &labels)?);
    }
    Ok(out)
}

impl Ord for ActionKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.column().cmp(&other.column())
    }
}

impl PartialOrd for ActionKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Turn-level evaluation over a when-task dump.
pub fn evaluate_when(dump: &PredictionDump) -> Result<MetricTriple> {
    if dump.task == Some(Task::What) {
        return Err(Error::Metric(
            "cannot run turn-level evaluation on a what-task dump".into(),
        ));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in &dump.rows {
        let z = row
            .icr_turn_logit
            .ok_or_else(|| Error::Metric("dump has no turn-level iCR logits".into()))?;
        scores.push(z);
        labels.push(row.turn_icr_label);
    }
    triple(&scores, &labels)
}

/// Clipart-level evaluation over a what-task dump: metrics pool the
/// flattened (turn x clipart) pairs.
pub fn evaluate_what(dump: &PredictionDump) -> Result<MetricTriple> {
    if dump.task == Some(Task::When) {
        return Err(Error::Metric(
            "cannot run clipart-level evaluation on a when-task dump".into(),
        ));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in &dump.rows {
        let z = row
            .icr_clipart_logits
            .as_ref()
            .ok_or_else(|| Error::Metric("dump has no clipart-level iCR logits".into()))?;
        let l = row
            .clipart_icr_labels
            .as_ref()
            .ok_or_else(|| Error::Metric("dump row lacks clipart labels".into()))?;
        if z.len() != GALLERY_SIZE || l.len() != GALLERY_SIZE {
            return Err(Error::Metric("clipart row width mismatch".into()));
        }
        scores.extend_from_slice(z);
        labels.extend_from_slice(l);
    }
    triple(&scores, &labels)
}

/// Build the full metrics row for one evaluated run.
pub fn metrics_row(
    dump: &PredictionDump,
    variant: String,
    inputs: String,
    agg: ActionAggregation,
) -> Result<MetricsRow> {
    let task = dump.task.unwrap_or(Task::When);
    let has_icr = dump
        .rows
        .iter()
        .any(|r| r.icr_turn_logit.is_some() || r.icr_clipart_logits.is_some());
    let icr = if has_icr {
        Some(match task {
            Task::When => evaluate_when(dump)?,
            Task::What => evaluate_what(dump)?,
        })
    } else {
        None
    };
    let has_actions = dump.rows.iter().any(|r| r.action_logits.is_some());
    let actions = if has_actions {
        Some(action_metrics(dump, agg)?)
    } else {
        None
    };
    Ok(MetricsRow {
        variant,
        inputs,
        task,
        icr,
        actions,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "-".to_string(),
    }
}

/// Reference metric values for the diff column of reports.
pub type ReferenceMetrics = BTreeMap<String, f64>;

/// Load a reference file: CSV with `key,value` rows where keys look like
/// `when/Overhearer/G, D/icr_ap`.
pub fn load_reference_metrics(path: impl AsRef<Path>) -> Result<ReferenceMetrics> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("key")) {
            continue;
        }
        let (key, value) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::data(format!("reference row {i}: no comma")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("reference row {i}: bad value")))?;
        out.insert(key.trim().to_string(), value);
    }
    Ok(out)
}

/// A comparison report over finished runs, shaped like the results tables:
/// one row per run, iCR and action metric blocks side by side.
pub struct Report {
    pub rows: Vec<MetricsRow>,
    pub reference: Option<ReferenceMetrics>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "task,variant,inputs,icr_ap,icr_bf1,icr_mf1,action_ap,action_bf1,action_mf1",
        );
        if self.reference.is_some() {
            out.push_str(",icr_ap_ref,icr_ap_delta");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},\"{}\",{},{},{},{},{},{}",
                r.task,
                r.variant,
                r.inputs,
                fmt_opt(r.icr.map(|t| t.ap)),
                fmt_opt(r.icr.map(|t| t.bf1)),
                fmt_opt(r.icr.map(|t| t.mf1)),
                fmt_opt(r.actions.map(|t| t.ap)),
                fmt_opt(r.actions.map(|t| t.bf1)),
                fmt_opt(r.actions.map(|t| t.mf1)),
            ));
            if let Some(reference) = &self.reference {
                let key = format!("{}/{}/{}/icr_ap", r.task, r.variant, r.inputs);
                match (reference.get(&key), r.icr) {
                    (Some(&ref_ap), Some(t)) => {
                        out.push_str(&format!(",{ref_ap:.3},{:+.3}", t.ap - ref_ap));
                    }
                    _ => out.push_str(",-,-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_ranking_has_ap_one() {
        let scores = vec![0.9, 0.8, 0.2, 0.1];
        let labels = vec![true, true, false, false];
        assert_abs_diff_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn interleaved_ranking_matches_hand_sum() {
        // ranking: 1, 0, 1, 0 -> AP = 1*(1/2) + (2/3)*(1/2)
        let scores = vec![0.9, 0.8, 0.7, 0.6];
        let labels = vec![true, false, true, false];
        assert_abs_diff_eq!(
            average_precision(&scores, &labels).unwrap(),
            0.5 + (2.0 / 3.0) * 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn no_positive_labels_is_an_error() {
        let scores = vec![0.9, 0.8];
        let labels = vec![false, false];
        assert!(average_precision(&scores, &labels).is_err());
    }

    #[test]
    fn constant_scores_give_the_positive_rate() {
        let scores = vec![0.5; 10];
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        assert_abs_diff_eq!(
            average_precision(&scores, &labels).unwrap(),
            0.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ap_is_invariant_under_monotone_transforms() {
        let scores = vec![-2.0, 0.3, 1.7, 0.0, -0.4, 2.5, 0.3];
        let labels = vec![false, true, false, true, false, true, false];
        let ap_logits = average_precision(&scores, &labels).unwrap();
        let probs: Vec<f64> = scores.iter().map(|&z| crate::model::sigmoid(z)).collect();
        let ap_probs = average_precision(&probs, &labels).unwrap();
        assert_abs_diff_eq!(ap_logits, ap_probs, epsilon = 1e-12);
    }

    #[test]
    fn f1_perfect_and_degenerate_cases() {
        let labels = vec![true, false, true, false];
        let perfect = vec![0.9, 0.1, 0.8, 0.2];
        let (bf1, mf1) = f1_scores(&perfect, &labels, 0.5);
        assert_abs_diff_eq!(bf1, 1.0);
        assert_abs_diff_eq!(mf1, 1.0);
        let all_neg = vec![0.1; 4];
        let (bf1, _) = f1_scores(&all_neg, &labels, 0.5);
        assert_abs_diff_eq!(bf1, 0.0);
    }

    #[test]
    fn f1_matches_confusion_matrix_arithmetic() {
        // TP=2 FP=1 FN=1 TN=6 -> bF1 = 2*2/(2*2+1+1) = 2/3 and the
        // negative class gets 2*6/(2*6+1+1) = 6/7
        let labels = vec![
            true, true, true, false, false, false, false, false, false, false,
        ];
        let probs = vec![0.9, 0.8, 0.2, 0.7, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        let (bf1, mf1) = f1_scores(&probs, &labels, 0.5);
        assert_abs_diff_eq!(bf1, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mf1, (2.0 / 3.0 + 6.0 / 7.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let dump = PredictionDump {
            task: Some(Task::What),
            rows: vec![],
        };
        assert!(evaluate_when(&dump).is_err());
        let dump = PredictionDump {
            task: Some(Task::When),
            rows: vec![],
        };
        assert!(evaluate_what(&dump).is_err());
    }

    #[test]
    fn oracle_predictions_score_one_everywhere() {
        let rows: Vec<DumpRow> = (0..6)
            .map(|i| {
                let turn_label = i % 3 == 0;
                let clip_labels: Vec<bool> =
                    (0..GALLERY_SIZE).map(|c| (c + i) % 5 == 0).collect();
                let act_labels: Vec<[bool; 5]> = (0..GALLERY_SIZE)
                    .map(|c| {
                        let mut row = [false; 5];
                        if (c + i) % 5 < 4 {
                            row[(c + i) % 5] = true;
                            row[4] = true;
                        }
                        row
                    })
                    .collect();
                DumpRow {
                    game_id: format!("test_{i:04}"),
                    turn_index: i,
                    turn_icr_label: turn_label,
                    clipart_icr_labels: Some(clip_labels.clone()),
                    action_labels: act_labels.clone(),
                    icr_turn_logit: Some(if turn_label { 5.0 } else { -5.0 }),
                    icr_clipart_logits: Some(
                        clip_labels
                            .iter()
                            .map(|&l| if l { 5.0 } else { -5.0 })
                            .collect(),
                    ),
                    action_logits: Some(
                        act_labels
                            .iter()
                            .map(|row| row.map(|l| if l { 5.0 } else { -5.0 }))
                            .collect(),
                    ),
                }
            })
            .collect();
        let when = PredictionDump {
            task: Some(Task::When),
            rows: rows.clone(),
        };
        let t = evaluate_when(&when).unwrap();
        assert_abs_diff_eq!(t.ap, 1.0);
        assert_abs_diff_eq!(t.bf1, 1.0);
        assert_abs_diff_eq!(t.mf1, 1.0);
        let what = PredictionDump {
            task: Some(Task::What),
            rows,
        };
        let t = evaluate_what(&what).unwrap();
        assert_abs_diff_eq!(t.ap, 1.0);
        let per = per_action_ap(&what).unwrap();
        assert_abs_diff_eq!(per[&ActionKind::AddDelete].ap, 1.0);
        let pooled = action_metrics(&what, ActionAggregation::Pooled).unwrap();
        assert_abs_diff_eq!(pooled.ap, 1.0);
    }

    #[test]
    fn all_negative_what_dump_surfaces_the_ap_error() {
        let rows = vec![DumpRow {
            game_id: "test_0001".into(),
            turn_index: 0,
            turn_icr_label: false,
            clipart_icr_labels: Some(vec![false; GALLERY_SIZE]),
            action_labels: vec![[false; 5]; GALLERY_SIZE],
            icr_turn_logit: None,
            icr_clipart_logits: Some(vec![0.0; GALLERY_SIZE]),
            action_logits: None,
        }];
        let dump = PredictionDump {
            task: Some(Task::What),
            rows,
        };
        assert!(evaluate_what(&dump).is_err());
    }

    #[test]
    fn report_renders_reference_deltas() {
        let rows = vec![MetricsRow {
            variant: "Overhearer".into(),
            inputs: "G, D".into(),
            task: Task::When,
            icr: Some(MetricTriple {
                ap: 0.40,
                bf1: 0.35,
                mf1: 0.64,
            }),
            actions: None,
        }];
        let mut reference = BTreeMap::new();
        reference.insert("when/Overhearer/G, D/icr_ap".to_string(), 0.384);
        let report = Report {
            rows,
            reference: Some(reference),
        };
        let csv = report.to_csv();
        assert!(csv.contains("0.384"));
        assert!(csv.contains("+0.016"));
    }
}
