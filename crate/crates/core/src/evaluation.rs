//! Detection metrics, ROC analysis, per-group recall, lead time and the
//! reward-threshold baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{AnomalyGroup, AnomalyLabelSet, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("truth contains a single class")]
    SingleClass,
    #[error("prediction and label keys differ")]
    KeyMismatch,
    #[error("trajectory {0} has no reward annotation")]
    NotAnnotated(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub mcc: f64,
    pub counts: Counts,
    /// Metrics whose denominator was zero and were set to 0.
    pub zero_denominator: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        flags.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

pub fn confusion_metrics(pred: &[bool], truth: &[bool]) -> Result<ConfusionMetrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = Counts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let mut flags = Vec::new();
    let precision = ratio(tp, tp + fp, "precision", &mut flags);
    let recall = ratio(tp, tp + fn_, "recall", &mut flags);
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_, "f1", &mut flags);
    let accuracy = (tp + tn) / c.total() as f64;
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, den, "mcc", &mut flags);
    Ok(ConfusionMetrics {
        precision,
        recall,
        f1,
        accuracy,
        mcc,
        counts: c,
        zero_denominator: flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
}

/// Area under the ROC curve and its points, one per distinct score.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<(f64, Vec<RocPoint>), EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::LengthMismatch(scores.len(), truth.len()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // consume the whole tie group at once
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok((auc, points))
}

/// Fraction of trajectories carrying each group that were predicted anomalous.
pub fn per_group_recall(
    preds: &BTreeMap<String, bool>,
    labels: &BTreeMap<String, AnomalyLabelSet>,
) -> Result<BTreeMap<AnomalyGroup, f64>, EvalError> {
    if preds.len() != labels.len() || preds.keys().zip(labels.keys()).any(|(a, b)| a != b) {
        return Err(EvalError::KeyMismatch);
    }
    let mut hits: BTreeMap<AnomalyGroup, (usize, usize)> = BTreeMap::new();
    for (id, set) in labels {
        let flagged = preds[id];
        for g in AnomalyGroup::ALL {
            if set.has(g) {
                let e = hits.entry(g).or_default();
                e.1 += 1;
                if flagged {
                    e.0 += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|(g, (h, n))| (g, h as f64 / n as f64)).collect())
}

/// Steps between the first prefix length whose score exceeds `threshold` and
/// the terminal step. `scores[j]` belongs to the prefix of length `j + 2`.
pub fn lead_time(scores: &[f64], wct_step: usize, threshold: f64) -> Option<i64> {
    scores
        .iter()
        .position(|&p| p > threshold)
        .map(|j| wct_step as i64 - (j as i64 + 2))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeSummary {
    pub cases: usize,
    pub detected: usize,
    /// Detections strictly before the terminal step, over all cases.
    pub preceding_fraction: f64,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

pub fn summarize_lead_times(leads: &[Option<i64>]) -> LeadTimeSummary {
    let mut got: Vec<i64> = leads.iter().flatten().copied().collect();
    got.sort_unstable();
    let n = got.len();
    let median = match n {
        0 => None,
        _ if n % 2 == 1 => Some(got[n / 2] as f64),
        _ => Some((got[n / 2 - 1] + got[n / 2]) as f64 / 2.0),
    };
    LeadTimeSummary {
        cases: leads.len(),
        detected: n,
        preceding_fraction: if leads.is_empty() {
            0.0
        } else {
            got.iter().filter(|&&l| l > 0).count() as f64 / leads.len() as f64
        },
        mean: (n > 0).then(|| got.iter().sum::<i64>() as f64 / n as f64),
        median,
    }
}

pub const BASELINE_WINDOW: usize = 10;
pub const BASELINE_CANDIDATES: usize = 100;

/// Lowest sliding-window mean of the per-step reward.
pub fn min_window_reward(traj: &Trajectory, window: usize) -> Result<f64, EvalError> {
    let r: Vec<f64> = traj
        .steps
        .iter()
        .map(|s| s.reward.ok_or_else(|| EvalError::NotAnnotated(traj.id.clone())))
        .collect::<Result<_, _>>()?;
    if r.is_empty() {
        return Err(EvalError::Empty);
    }
    let w = window.min(r.len()).max(1);
    let mut sum: f64 = r[..w].iter().sum();
    let mut best = sum;
    for i in w..r.len() {
        sum += r[i] - r[i - w];
        best = best.min(sum);
    }
    Ok(best / w as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub threshold: f64,
    pub train_f1: f64,
    pub degenerate: bool,
}

/// Grid-searches the score threshold maximizing F1, predicting anomalous when `score < threshold`.
pub fn fit_threshold(scores: &[f64], truth: &[bool]) -> Result<BaselineFit, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::LengthMismatch(scores.len(), truth.len()));
    }
    if !truth.iter().any(|&t| t) || truth.iter().all(|&t| t) {
        return Err(EvalError::SingleClass);
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        let pred: Vec<bool> = scores.iter().map(|&s| s < lo).collect();
        return Ok(BaselineFit {
            threshold: lo,
            train_f1: confusion_metrics(&pred, truth)?.f1,
            degenerate: true,
        });
    }
    let mut best = BaselineFit {
        threshold: lo,
        train_f1: -1.0,
        degenerate: false,
    };
    for k in 0..BASELINE_CANDIDATES {
        let thr = lo + (hi - lo) * k as f64 / (BASELINE_CANDIDATES - 1) as f64;
        let pred: Vec<bool> = scores.iter().map(|&s| s < thr).collect();
        let f1 = confusion_metrics(&pred, truth)?.f1;
        if f1 > best.train_f1 {
            best.threshold = thr;
            best.train_f1 = f1;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub fit: BaselineFit,
    pub test_scores: Vec<f64>,
    pub predictions: Vec<bool>,
}

pub fn baseline_reward_threshold(
    train: &[Trajectory],
    train_truth: &[bool],
    test: &[Trajectory],
) -> Result<BaselineResult, EvalError> {
    let score = |ts: &[Trajectory]| -> Result<Vec<f64>, EvalError> {
        ts.iter().map(|t| min_window_reward(t, BASELINE_WINDOW)).collect()
    };
    let fit = fit_threshold(&score(train)?, train_truth)?;
    if fit.degenerate {
        log::warn!("baseline: constant training scores, threshold fixed at {}", fit.threshold);
    }
    let test_scores = score(test)?;
    let predictions = test_scores.iter().map(|&s| s < fit.threshold).collect();
    Ok(BaselineResult {
        fit,
        test_scores,
        predictions,
    })
}

/// Evaluation ground truth: any rule-labeled anomaly or a worst-case terminus.
pub fn truth_of(traj: &Trajectory) -> bool {
    traj.anomaly_labels.is_anomalous() || traj.wct_label == 1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub mcc: f64,
    pub auc: f64,
    pub counts: Counts,
    pub zero_denominator: Vec<String>,
    #[serde(skip)]
    pub roc_points: Vec<RocPoint>,
    pub per_group_recall: BTreeMap<AnomalyGroup, f64>,
    pub lead_time: Option<LeadTimeSummary>,
}

/// Thresholds `scores` and assembles the full report against `truth`.
pub fn report(
    ids: &[String],
    scores: &[f64],
    truth: &[bool],
    labels: &[AnomalyLabelSet],
    threshold: f64,
) -> Result<MetricsReport, EvalError> {
    let pred: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let cm = confusion_metrics(&pred, truth)?;
    let (auc, roc_points) = match roc_auc(scores, truth) {
        Ok(r) => r,
        Err(EvalError::SingleClass) => (0.5, Vec::new()),
        Err(e) => return Err(e),
    };
    let preds: BTreeMap<String, bool> = ids.iter().cloned().zip(pred).collect();
    let label_map: BTreeMap<String, AnomalyLabelSet> = ids.iter().cloned().zip(labels.iter().cloned()).collect();
    Ok(MetricsReport {
        threshold,
        f1: cm.f1,
        precision: cm.precision,
        recall: cm.recall,
        accuracy: cm.accuracy,
        mcc: cm.mcc,
        auc,
        counts: cm.counts,
        zero_denominator: cm.zero_denominator,
        roc_points,
        per_group_recall: per_group_recall(&preds, &label_map)?,
        lead_time: None,
    })
}
