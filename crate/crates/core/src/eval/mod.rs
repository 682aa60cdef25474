//! Event-level detection metrics, AHI estimation with severity grading,
//! screening, and agreement statistics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{interval_iou, EventInterval, EventLabel};
use crate::error::{Error, Result};
use crate::synth::estimated_ahi_events;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Zero when precision + recall is zero.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// A matched (prediction index, truth index, IoU) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Indexed by [`EventLabel::index`].
    pub per_label: [Counts; EventLabel::COUNT],
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    pub fn counts(&self, label: EventLabel) -> Counts {
        self.per_label[label.index()]
    }

    pub fn f1(&self, label: EventLabel) -> f64 {
        self.counts(label).f1()
    }

    /// Mean F1 over the labels present in the ground truth. With no truth
    /// events at all it is 1 if there are no predictions either, else 0.
    pub fn macro_f1(&self) -> f64 {
        let present: Vec<&Counts> = self.per_label.iter().filter(|c| c.tp + c.fn_ > 0).collect();
        if present.is_empty() {
            let preds: usize = self.per_label.iter().map(|c| c.fp).sum();
            return if preds == 0 { 1.0 } else { 0.0 };
        }
        present.iter().map(|c| c.f1()).sum::<f64>() / present.len() as f64
    }

    /// Sums counts (pairs are kept only from `self`).
    pub fn accumulate(&mut self, other: &MatchResult) {
        for (a, b) in self.per_label.iter_mut().zip(&other.per_label) {
            a.add(b);
        }
    }
}

/// One-to-one matching per label. A pair is a candidate when its IoU is
/// positive and at least `iou_threshold`. Candidates are first taken
/// greedily in descending IoU (ties by prediction then truth index); the
/// greedy matching is then grown along augmenting paths until no
/// prediction can be added, so the number of true positives is the
/// largest achievable. When greedy is already maximum it is returned
/// unchanged.
pub fn match_events(pred: &[EventInterval], truth: &[EventInterval], iou_threshold: f64) -> MatchResult {
    let mut cands: Vec<MatchedPair> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if p.label != t.label {
                continue;
            }
            let iou = interval_iou(p, t);
            if iou > 0.0 && iou >= iou_threshold {
                cands.push(MatchedPair { pred: i, truth: j, iou });
            }
        }
    }
    cands.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.pred.cmp(&b.pred))
            .then(a.truth.cmp(&b.truth))
    });
    let mut of_pred: Vec<Option<usize>> = vec![None; pred.len()];
    let mut of_truth: Vec<Option<usize>> = vec![None; truth.len()];
    // adjacency in descending IoU
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); pred.len()];
    for c in &cands {
        adj[c.pred].push((c.truth, c.iou));
        if of_pred[c.pred].is_none() && of_truth[c.truth].is_none() {
            of_pred[c.pred] = Some(c.truth);
            of_truth[c.truth] = Some(c.pred);
        }
    }

    fn augment(
        i: usize,
        adj: &[Vec<(usize, f64)>],
        of_pred: &mut [Option<usize>],
        of_truth: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &(j, _) in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            let free = match of_truth[j] {
                None => true,
                Some(k) => augment(k, adj, of_pred, of_truth, seen),
            };
            if free {
                of_pred[i] = Some(j);
                of_truth[j] = Some(i);
                return true;
            }
        }
        false
    }
    // a prediction with no augmenting path now never gains one later
    let mut seen = vec![false; truth.len()];
    for i in 0..pred.len() {
        if of_pred[i].is_none() && !adj[i].is_empty() {
            seen.iter_mut().for_each(|s| *s = false);
            augment(i, &adj, &mut of_pred, &mut of_truth, &mut seen);
        }
    }

    let mut result = MatchResult::default();
    for (i, p) in pred.iter().enumerate() {
        match of_pred[i] {
            Some(j) => {
                let iou = adj[i].iter().find(|&&(t, _)| t == j).map(|&(_, v)| v).unwrap_or(0.0);
                result.per_label[p.label.index()].tp += 1;
                result.pairs.push(MatchedPair { pred: i, truth: j, iou });
            }
            None => result.per_label[p.label.index()].fp += 1,
        }
    }
    for (j, t) in truth.iter().enumerate() {
        if of_truth[j].is_none() {
            result.per_label[t.label.index()].fn_ += 1;
        }
    }
    result
}

/// F1 per label and macro-F1 at each IoU threshold, pooled over recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Curve {
    pub thresholds: Vec<f64>,
    /// `per_label[i][k]`: F1 of label `k` at `thresholds[i]`.
    pub per_label: Vec<[f64; EventLabel::COUNT]>,
    pub macro_f1: Vec<f64>,
}

impl F1Curve {
    pub fn at(&self, threshold: f64) -> Option<usize> {
        self.thresholds.iter().position(|t| (t - threshold).abs() < 1e-9)
    }

    /// Comma-separated table: `iou,apnea,hypopnea,arousal,desaturation,macro`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iou");
        for l in EventLabel::ALL {
            s.push(',');
            s.push_str(l.name());
        }
        s.push_str(",macro\n");
        for (i, t) in self.thresholds.iter().enumerate() {
            s.push_str(&format!("{t:.2}"));
            for v in self.per_label[i] {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push_str(&format!(",{:.6}\n", self.macro_f1[i]));
        }
        s
    }
}

/// `recordings` holds (predictions, truth) per recording.
pub fn f1_curve(recordings: &[(Vec<EventInterval>, Vec<EventInterval>)], thresholds: &[f64]) -> F1Curve {
    let mut per_label = Vec::with_capacity(thresholds.len());
    let mut macro_f1 = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let pooled = pooled_match(recordings, thr);
        per_label.push(std::array::from_fn(|k| pooled.per_label[k].f1()));
        macro_f1.push(pooled.macro_f1());
    }
    let curve = F1Curve {
        thresholds: thresholds.to_vec(),
        per_label,
        macro_f1,
    };
    debug_assert!(is_nonincreasing(&curve), "F1 must not rise with the IoU threshold");
    curve
}

/// Counts summed over recordings at one IoU threshold.
pub fn pooled_match(recordings: &[(Vec<EventInterval>, Vec<EventInterval>)], iou_threshold: f64) -> MatchResult {
    let mut pooled = MatchResult::default();
    for (p, t) in recordings {
        pooled.accumulate(&match_events(p, t, iou_threshold));
    }
    pooled
}

/// True when every per-label curve is nonincreasing along ascending thresholds.
pub fn is_nonincreasing(curve: &F1Curve) -> bool {
    let ascending = curve.thresholds.windows(2).all(|w| w[0] <= w[1]);
    ascending
        && curve
            .per_label
            .windows(2)
            .all(|w| (0..EventLabel::COUNT).all(|k| w[1][k] <= w[0][k] + 1e-12))
}

/// (apneas + hypopneas) per hour of sleep.
pub fn compute_ahi(events: &[EventInterval], total_sleep_time_min: f64) -> Result<f64> {
    if !(total_sleep_time_min > 0.0) {
        return Err(Error::UndefinedAhi);
    }
    let n = events.iter().filter(|e| e.label.is_respiratory()).count();
    Ok(n as f64 / (total_sleep_time_min / 60.0))
}

/// AHI from apneas plus hypopneas with an accompanying arousal or
/// desaturation among the predictions.
pub fn estimated_ahi_eeg_only(pred: &[EventInterval], total_sleep_time_min: f64, assoc_window_s: f64) -> Result<f64> {
    compute_ahi(&estimated_ahi_events(pred, assoc_window_s), total_sleep_time_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityClass {
    None,
    Mild,
    Moderate,
    Severe,
}

impl SeverityClass {
    pub const ALL: [SeverityClass; 4] = [Self::None, Self::Mild, Self::Moderate, Self::Severe];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Mild => "mild",
            Self::Moderate => "moderate",
            Self::Severe => "severe",
        }
    }
}

impl fmt::Display for SeverityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_ahi(ahi: f64) -> Result<()> {
    if ahi.is_nan() || ahi < 0.0 {
        return Err(Error::InvalidArgument(format!("AHI must be nonnegative, got {ahi}")));
    }
    Ok(())
}

/// Lower bounds 5, 15 and 30 are inclusive.
pub fn severity(ahi: f64) -> Result<SeverityClass> {
    check_ahi(ahi)?;
    Ok(if ahi < 5.0 {
        SeverityClass::None
    } else if ahi < 15.0 {
        SeverityClass::Mild
    } else if ahi < 30.0 {
        SeverityClass::Moderate
    } else {
        SeverityClass::Severe
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Screen {
    Below,
    ModerateOrSevere,
}

impl Screen {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Below => "below",
            Self::ModerateOrSevere => "moderate_or_severe",
        }
    }
}

/// AHI ≥ 15 screens positive.
pub fn screen(ahi: f64) -> Result<Screen> {
    check_ahi(ahi)?;
    Ok(if ahi < 15.0 {
        Screen::Below
    } else {
        Screen::ModerateOrSevere
    })
}

/// Rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized percentages; empty rows are all zero.
    pub percent: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        ratio(trace, self.total())
    }

    /// Mean one-vs-rest F1 over classes present in the truth.
    pub fn macro_f1(&self) -> f64 {
        let n = self.counts.len();
        let mut f1s = Vec::new();
        for c in 0..n {
            let support: usize = self.counts[c].iter().sum();
            if support == 0 {
                continue;
            }
            let tp = self.counts[c][c];
            let predicted: usize = (0..n).map(|r| self.counts[r][c]).sum();
            f1s.push(ratio(2 * tp, support + predicted));
        }
        if f1s.is_empty() {
            0.0
        } else {
            f1s.iter().sum::<f64>() / f1s.len() as f64
        }
    }
}

/// `preds`/`truths` are class indices below `classes.len()`.
pub fn confusion_matrix(preds: &[usize], truths: &[usize], classes: &[&str]) -> Result<ConfusionMatrix> {
    let n = classes.len();
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut counts = vec![vec![0usize; n]; n];
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= n || t >= n {
            return Err(Error::InvalidArgument(format!("class index out of range: {p}/{t}")));
        }
        counts[t][p] += 1;
    }
    let percent = counts
        .iter()
        .map(|row| {
            let s: usize = row.iter().sum();
            row.iter()
                .map(|&c| if s == 0 { 0.0 } else { 100.0 * c as f64 / s as f64 })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        classes: classes.iter().map(|s| s.to_string()).collect(),
        counts,
        percent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionStats {
    pub r2: f64,
    /// Mean of `pred − true`.
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Coefficient of determination and Bland–Altman limits (bias ± 1.96 SD of
/// the differences, sample SD).
pub fn regression_stats(pred: &[f64], truth: &[f64]) -> Result<RegressionStats> {
    if pred.len() != truth.len() || pred.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 paired values, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mean_t = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean_t).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    let diffs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let bias = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(RegressionStats {
        r2: 1.0 - ss_res / ss_tot,
        bias,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

#[cfg(test)]
mod tests;
