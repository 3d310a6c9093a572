//! Prediction-certainty analysis of the action model.
//!
//! The certainty of a binary prediction is its classification margin
//! `|P - (1 - P)| = |2P - 1|`: 0 at maximal indecision, 1 at full
//! confidence. The analysis takes an action model's meta-action
//! probabilities, groups margins by iCR status (per clipart, and per turn
//! via the turn minimum), compares the two empirical distributions with a
//! two-sample Kolmogorov-Smirnov test, and measures how well the margin
//! works directly as an iCR signal. Both score directions are reported:
//! `margin` (the headline value) and `1 - margin`, which ranks uncertain
//! predictions first.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{average_precision, PredictionDump};
use crate::model::sigmoid;

/// Classification margin of a probability.
pub fn margin(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Metric(format!("probability {p} outside [0, 1]")));
    }
    Ok((2.0 * p - 1.0).abs())
}

/// Grouping level of certainty samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Clipart,
    Turn,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}",
            match self {
                Level::Clipart => "clipart",
                Level::Turn => "turn",
            }
        )
    }
}

/// Margin samples of one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertaintySample {
    pub icr: bool,
    pub level: Level,
    pub values: Vec<f64>,
}

impl CertaintySample {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        let mean = self.mean();
        (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.values.len() as f64)
            .sqrt()
    }
}

/// Extract grouped margin samples from an action-model dump.
///
/// The dump must carry action logits; margins are computed on the
/// meta-action probability of every clipart. At the clipart level a sample
/// is iCR-grouped when its clipart carries a positive iCR target; at the
/// turn level the per-turn minimum margin is grouped by the turn label.
pub fn collect_samples(
    dump: &PredictionDump,
    level: Level,
) -> Result<(CertaintySample, CertaintySample)> {
    let mut icr = Vec::new();
    let mut non_icr = Vec::new();
    for row in &dump.rows {
        let logits = row.action_logits.as_ref().ok_or_else(|| {
            Error::Metric("certainty analysis needs an action-predicting model's dump".into())
        })?;
        let margins: Vec<f64> = logits
            .iter()
            .map(|r| margin(sigmoid(r[4])))
            .collect::<Result<_>>()?;
        match level {
            Level::Clipart => {
                for (i, &m) in margins.iter().enumerate() {
                    let is_icr_clipart = row
                        .clipart_icr_labels
                        .as_ref()
                        .map(|f| f[i])
                        .unwrap_or(false);
                    if is_icr_clipart {
                        icr.push(m);
                    } else {
                        non_icr.push(m);
                    }
                }
            }
            Level::Turn => {
                let min = margins.iter().cloned().fold(f64::INFINITY, f64::min);
                if row.turn_icr_label {
                    icr.push(min);
                } else {
                    non_icr.push(min);
                }
            }
        }
    }
    Ok((
        CertaintySample {
            icr: true,
            level,
            values: icr,
        },
        CertaintySample {
            icr: false,
            level,
            values: non_icr,
        },
    ))
}

/// Result of the two-sample Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

impl KsResult {
    /// Values below representable precision print as `< 1e-300`.
    pub fn p_display(&self) -> String {
        if self.p_value < 1e-300 {
            "< 1e-300".to_string()
        } else {
            format!("{:.6e}", self.p_value)
        }
    }
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 x^2)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=1000 {
        let term = (-2.0 * (k as f64).powi(2) * x * x).exp();
        if term < 1e-300 {
            break;
        }
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with a two-sided alternative.
///
/// The statistic is the supremum of the absolute ECDF difference; the
/// p-value uses the asymptotic Kolmogorov distribution at
/// `sqrt(n*m/(n+m)) * D`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("KS test requires two non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (sa.len(), sb.len());
    // sweep the merged order, tracking both ECDFs
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n || j < m {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&va), Some(&vb)) => va.min(vb),
            (Some(&va), None) => va,
            (None, Some(&vb)) => vb,
            (None, None) => break,
        };
        while i < n && sa[i] <= x {
            i += 1;
        }
        while j < m && sb[j] <= x {
            j += 1;
        }
        let fa = i as f64 / n as f64;
        let fb = j as f64 / m as f64;
        d = d.max((fa - fb).abs());
    }
    let en = (n as f64 * m as f64) / (n + m) as f64;
    let p_value = kolmogorov_sf(en.sqrt() * d);
    Ok(KsResult {
        statistic: d,
        p_value,
    })
}

/// Nondecreasing step-function points of an empirical CDF, from 0 to 1.
pub fn ecdf_points(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        out.push((sorted[i], j as f64 / n));
        i = j;
    }
    out
}

/// Five-number summary with quartiles by linear interpolation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Metric("cannot summarise an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    Ok(BoxStats {
        min: sorted[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Analysis results for one grouping level.
#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: Level,
    pub icr_n: usize,
    pub non_icr_n: usize,
    pub icr_mean: f64,
    pub icr_std: f64,
    pub non_icr_mean: f64,
    pub non_icr_std: f64,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub p_display: String,
    /// AP of the margin used directly as the iCR score.
    pub ap_margin: f64,
    /// AP of `1 - margin` (uncertainty-first ranking).
    pub ap_inverted_margin: f64,
}

fn level_report(
    level: Level,
    icr: &CertaintySample,
    non_icr: &CertaintySample,
) -> Result<LevelReport> {
    let ks = ks_two_sample(&icr.values, &non_icr.values)?;
    let mut scores: Vec<f64> = Vec::with_capacity(icr.values.len() + non_icr.values.len());
    let mut labels: Vec<bool> = Vec::with_capacity(scores.capacity());
    scores.extend(&icr.values);
    labels.extend(std::iter::repeat(true).take(icr.values.len()));
    scores.extend(&non_icr.values);
    labels.extend(std::iter::repeat(false).take(non_icr.values.len()));
    let ap_margin = average_precision(&scores, &labels)?;
    let inverted: Vec<f64> = scores.iter().map(|&m| 1.0 - m).collect();
    let ap_inverted_margin = average_precision(&inverted, &labels)?;
    Ok(LevelReport {
        level,
        icr_n: icr.values.len(),
        non_icr_n: non_icr.values.len(),
        icr_mean: icr.mean(),
        icr_std: icr.std(),
        non_icr_mean: non_icr.mean(),
        non_icr_std: non_icr.std(),
        ks_statistic: ks.statistic,
        p_value: ks.p_value,
        p_display: ks.p_display(),
        ap_margin,
        ap_inverted_margin,
    })
}

/// Full analysis report over both levels.
#[derive(Debug, Clone, Serialize)]
pub struct H2Report {
    pub clipart: LevelReport,
    pub turn: LevelReport,
}

impl H2Report {
    /// Summary table: one block per level, mean (std) per group, KS and AP.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "level,icr_mean,icr_std,non_icr_mean,non_icr_std,ks_statistic,p_value,ap_margin,ap_inverted_margin\n",
        );
        for r in [&self.clipart, &self.turn] {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{:.3},{:.3},{:.3},{},{:.3},{:.3}",
                r.level,
                r.icr_mean,
                r.icr_std,
                r.non_icr_mean,
                r.non_icr_std,
                r.ks_statistic,
                r.p_display,
                r.ap_margin,
                r.ap_inverted_margin
            );
        }
        out
    }
}

/// Run the full certainty analysis over an action-model dump.
pub fn run_h2(dump: &PredictionDump) -> Result<H2Report> {
    let (clip_icr, clip_non) = collect_samples(dump, Level::Clipart)?;
    let (turn_icr, turn_non) = collect_samples(dump, Level::Turn)?;
    Ok(H2Report {
        clipart: level_report(Level::Clipart, &clip_icr, &clip_non)?,
        turn: level_report(Level::Turn, &turn_icr, &turn_non)?,
    })
}

// ---------------------------------------------------------------------------
// Plot emission (hand-rolled SVG; no plotting dependency)
// ---------------------------------------------------------------------------

const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 360.0;
const MARGIN_L: f64 = 50.0;
const MARGIN_B: f64 = 40.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_R: f64 = 16.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n\
         <rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"16\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\">{title}</text>\n",
        PLOT_W / 2.0
    )
}

fn axes() -> String {
    let x0 = MARGIN_L;
    let y0 = PLOT_H - MARGIN_B;
    let x1 = PLOT_W - MARGIN_R;
    let y1 = MARGIN_T;
    let mut s = format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let x = x0 + frac * (x1 - x0);
        let y = y0 - frac * (y0 - y1);
        let _ = write!(
            s,
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{frac:.2}</text>\n\
             <text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{frac:.2}</text>\n",
            y0 + 14.0,
            x0 - 6.0
        );
    }
    s
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    let px = MARGIN_L + x.clamp(0.0, 1.0) * (PLOT_W - MARGIN_R - MARGIN_L);
    let py = (PLOT_H - MARGIN_B) - y.clamp(0.0, 1.0) * (PLOT_H - MARGIN_B - MARGIN_T);
    (px, py)
}

/// Render ECDF step curves for labelled samples over [0, 1].
pub fn ecdf_svg(series: &[(&str, &[f64], &str)], title: &str) -> String {
    let mut svg = svg_header(title);
    svg.push_str(&axes());
    for (idx, (name, values, color)) in series.iter().enumerate() {
        let pts = ecdf_points(values);
        let mut path = String::new();
        let (sx, sy) = to_px(0.0, 0.0);
        let _ = write!(path, "M {sx:.1} {sy:.1}");
        let mut prev_y = 0.0;
        for (x, y) in &pts {
            let (px, _) = to_px(*x, 0.0);
            let (_, py_prev) = to_px(0.0, prev_y);
            let (_, py) = to_px(0.0, *y);
            let _ = write!(path, " L {px:.1} {py_prev:.1} L {px:.1} {py:.1}");
            prev_y = *y;
        }
        let (ex, ey) = to_px(1.0, 1.0);
        let _ = write!(path, " L {ex:.1} {ey:.1}");
        let _ = write!(
            svg,
            "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"{color}\">{name}</text>\n",
            MARGIN_L + 10.0,
            MARGIN_T + 14.0 + 14.0 * idx as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Render side-by-side boxplots for labelled samples over [0, 1].
pub fn boxplot_svg(series: &[(&str, BoxStats, &str)], title: &str) -> String {
    let mut svg = svg_header(title);
    svg.push_str(&axes());
    let slots = series.len() as f64;
    for (idx, (name, stats, color)) in series.iter().enumerate() {
        let center = (idx as f64 + 0.5) / slots;
        let half_w = 0.08;
        let (cx, _) = to_px(center, 0.0);
        let (x0, _) = to_px(center - half_w, 0.0);
        let (x1, _) = to_px(center + half_w, 0.0);
        let (_, y_min) = to_px(0.0, stats.min);
        let (_, y_q1) = to_px(0.0, stats.q1);
        let (_, y_med) = to_px(0.0, stats.median);
        let (_, y_q3) = to_px(0.0, stats.q3);
        let (_, y_max) = to_px(0.0, stats.max);
        let _ = write!(
            svg,
            "<line x1=\"{cx}\" y1=\"{y_min}\" x2=\"{cx}\" y2=\"{y_q1}\" stroke=\"{color}\"/>\n\
             <line x1=\"{cx}\" y1=\"{y_q3}\" x2=\"{cx}\" y2=\"{y_max}\" stroke=\"{color}\"/>\n\
             <rect x=\"{x0}\" y=\"{y_q3}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{color}\"/>\n\
             <line x1=\"{x0}\" y1=\"{y_med}\" x2=\"{x1}\" y2=\"{y_med}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{cx}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\" fill=\"{color}\">{name}</text>\n",
            x1 - x0,
            (y_q1 - y_q3).abs(),
            PLOT_H - 8.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write the full set of analysis artefacts into a directory: the summary
/// CSV and JSON, ECDF points per group, and the ECDF/boxplot figures.
pub fn write_h2_outputs(dump: &PredictionDump, out_dir: impl AsRef<Path>) -> Result<H2Report> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report = run_h2(dump)?;
    fs::write(out_dir.join("h2_summary.csv"), report.to_csv())
        .map_err(|e| Error::io(out_dir.join("h2_summary.csv"), e))?;
    fs::write(
        out_dir.join("h2_summary.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(|e| Error::io(out_dir.join("h2_summary.json"), e))?;
    for level in [Level::Clipart, Level::Turn] {
        let (icr, non_icr) = collect_samples(dump, level)?;
        let mut csv = String::from("group,value,ecdf\n");
        for (sample, name) in [(&icr, "icr"), (&non_icr, "non_icr")] {
            for (x, y) in ecdf_points(&sample.values) {
                let _ = writeln!(csv, "{name},{x},{y}");
            }
        }
        fs::write(out_dir.join(format!("ecdf_{level}.csv")), csv)
            .map_err(|e| Error::io(out_dir.join(format!("ecdf_{level}.csv")), e))?;
        let svg = ecdf_svg(
            &[
                ("iCR", icr.values.as_slice(), "#c0392b"),
                ("non-iCR", non_icr.values.as_slice(), "#2980b9"),
            ],
            &format!("certainty ECDF ({level} level)"),
        );
        fs::write(out_dir.join(format!("ecdf_{level}.svg")), svg)
            .map_err(|e| Error::io(out_dir.join(format!("ecdf_{level}.svg")), e))?;
        let svg = boxplot_svg(
            &[
                ("iCR", box_stats(&icr.values)?, "#c0392b"),
                ("non-iCR", box_stats(&non_icr.values)?, "#2980b9"),
            ],
            &format!("certainty distribution ({level} level)"),
        );
        fs::write(out_dir.join(format!("boxplot_{level}.svg")), svg)
            .map_err(|e| Error::io(out_dir.join(format!("boxplot_{level}.svg")), e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn margin_hits_the_anchor_points() {
        assert_abs_diff_eq!(margin(0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(margin(1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(margin(0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(margin(0.75).unwrap(), 0.5);
        assert!(margin(1.2).is_err());
        assert!(margin(-0.1).is_err());
    }

    #[test]
    fn margin_is_symmetric() {
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            assert_abs_diff_eq!(
                margin(p).unwrap(),
                margin(1.0 - p).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn ks_identical_samples_have_zero_statistic() {
        let a = vec![0.1, 0.5, 0.9, 0.3];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ks_disjoint_supports_have_statistic_one() {
        let a = vec![0.1, 0.2, 0.3];
        let b = vec![0.7, 0.8, 0.9];
        let r = ks_two_sample(&a, &b).unwrap();
        assert_abs_diff_eq!(r.statistic, 1.0);
    }

    #[test]
    fn ks_matches_the_hand_computed_example() {
        let a = vec![0.1, 0.4, 0.9];
        let b = vec![0.2, 0.5];
        let r = ks_two_sample(&a, &b).unwrap();
        assert_abs_diff_eq!(r.statistic, 1.0 / 3.0, epsilon = 1e-12);
        let swapped = ks_two_sample(&b, &a).unwrap();
        assert_abs_diff_eq!(r.statistic, swapped.statistic, epsilon = 1e-12);
    }

    #[test]
    fn ks_rejects_empty_samples() {
        assert!(ks_two_sample(&[], &[0.1]).is_err());
    }

    #[test]
    fn ecdf_points_are_nondecreasing_from_zero_to_one() {
        let values = vec![0.5, 0.1, 0.5, 0.9, 0.2];
        let pts = ecdf_points(&values);
        let mut prev = 0.0;
        for (_, y) in &pts {
            assert!(*y >= prev);
            prev = *y;
        }
        assert_abs_diff_eq!(pts.last().unwrap().1, 1.0);
    }

    #[test]
    fn single_clipart_at_half_probability_gives_turn_minimum_zero() {
        use crate::evaluation::DumpRow;
        let mut logits = vec![[5.0f64; 5]; crate::GALLERY_SIZE];
        logits[3] = [0.0; 5]; // probability 0.5 everywhere, margin 0
        let dump = PredictionDump {
            task: Some(crate::corpus::Task::When),
            rows: vec![DumpRow {
                game_id: "train_0001".into(),
                turn_index: 0,
                turn_icr_label: true,
                clipart_icr_labels: None,
                action_labels: vec![[false; 5]; crate::GALLERY_SIZE],
                icr_turn_logit: None,
                icr_clipart_logits: None,
                action_logits: Some(logits),
            }],
        };
        let (icr, non_icr) = collect_samples(&dump, Level::Turn).unwrap();
        assert_eq!(icr.values.len(), 1);
        assert_abs_diff_eq!(icr.values[0], 0.0);
        assert!(non_icr.values.is_empty());
    }

    #[test]
    fn kolmogorov_sf_brackets() {
        assert_abs_diff_eq!(kolmogorov_sf(0.0), 1.0);
        assert!(kolmogorov_sf(0.5) > 0.9);
        assert!(kolmogorov_sf(2.0) < 0.001);
        // classic anchor: Q(1.36) ~ 0.049
        let q = kolmogorov_sf(1.36);
        assert!((q - 0.049).abs() < 0.002, "Q(1.36) = {q}");
    }

    #[test]
    fn box_stats_match_linear_interpolation() {
        let values = vec![0.0, 1.0, 2.0, 3.0];
        let s = box_stats(&values).unwrap();
        assert_abs_diff_eq!(s.q1, 0.75);
        assert_abs_diff_eq!(s.median, 1.5);
        assert_abs_diff_eq!(s.q3, 2.25);
    }

    #[test]
    fn svg_emitters_produce_wellformed_markup() {
        let a = vec![0.1, 0.3, 0.8];
        let b = vec![0.5, 0.9];
        let svg = ecdf_svg(
            &[("a", a.as_slice(), "#c0392b"), ("b", b.as_slice(), "#2980b9")],
            "test",
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<path").count(), 2);
        let bp = boxplot_svg(&[("a", box_stats(&a).unwrap(), "#c0392b")], "test");
        assert!(bp.contains("<rect"));
    }
}
