//! Classification quality, threshold error rates and regime amplification ratios.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric needs at least one observation")]
    Empty,
    #[error("metric undefined without both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("label {0} is not 0 or 1")]
    Label(u8),
    #[error("percentile must lie in [0, 100], got {0}")]
    Percentile(f64),
}

/// Predicted probabilities paired with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(MetricError::Label(bad));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Same scores with every label flipped.
    pub fn swapped(&self) -> Self {
        Self {
            scores: self.scores.clone(),
            labels: self.labels.iter().map(|y| 1 - y).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub brier: f64,
}

impl PerformanceReport {
    pub fn compute(s: &ScoredSet, tau: f64) -> Result<Self, MetricError> {
        Ok(Self {
            auroc: auroc(s)?,
            accuracy: accuracy(s, tau)?,
            brier: brier(s)?,
        })
    }
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)`, ties counted as one half.
pub fn auroc(s: &ScoredSet) -> Result<f64, MetricError> {
    let n_pos = s.positives();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    let ranks = average_ranks(&s.scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(&s.labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of rows where `score >= tau` agrees with the label.
pub fn accuracy(s: &ScoredSet, tau: f64) -> Result<f64, MetricError> {
    if s.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|(p, y)| u8::from(**p >= tau) == **y)
        .count();
    Ok(hits as f64 / s.len() as f64)
}

pub fn brier(s: &ScoredSet) -> Result<f64, MetricError> {
    if s.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(s.scores
        .iter()
        .zip(&s.labels)
        .map(|(p, y)| (p - f64::from(*y)).powi(2))
        .sum::<f64>()
        / s.len() as f64)
}

/// FNR and FPR under the rule `predict positive iff score >= tau`.
/// A rate is `None` when its denominator class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn confusion_rates(s: &ScoredSet, tau: f64) -> ConfusionRates {
    let (mut pos, mut neg, mut missed, mut false_alarms) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in s.scores.iter().zip(&s.labels) {
        if y == 1 {
            pos += 1;
            if p < tau {
                missed += 1;
            }
        } else {
            neg += 1;
            if p >= tau {
                false_alarms += 1;
            }
        }
    }
    ConfusionRates {
        fnr: (pos > 0).then(|| missed as f64 / pos as f64),
        fpr: (neg > 0).then(|| false_alarms as f64 / neg as f64),
    }
}

/// Nearest-rank percentile: the order statistic at `ceil(pct/100 * N)` (1-based, at least 1).
pub fn percentile_threshold(scores: &[f64], pct: f64) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(MetricError::Percentile(pct));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // the 1e-9 guard keeps products like 0.95 * 100 from rounding up a rank
    let rank = ((pct / 100.0 * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdName {
    Conservative,
    Balanced,
    HighRisk,
    Custom,
}

impl ThresholdName {
    pub fn for_percentile(pct: f64) -> Self {
        if pct == 90.0 {
            ThresholdName::Conservative
        } else if pct == 50.0 {
            ThresholdName::Balanced
        } else if pct == 95.0 {
            ThresholdName::HighRisk
        } else {
            ThresholdName::Custom
        }
    }

    pub fn label(&self, pct: f64) -> String {
        match self {
            ThresholdName::Conservative => format!("Conservative ({pct}th)"),
            ThresholdName::Balanced => format!("Balanced ({pct}th)"),
            ThresholdName::HighRisk => format!("High-Risk ({pct}th)"),
            ThresholdName::Custom => format!("Percentile ({pct}th)"),
        }
    }
}

/// Error rates at one operating threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub name: ThresholdName,
    pub percentile: f64,
    pub tau: f64,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
}

impl ThresholdReport {
    pub fn at(s: &ScoredSet, percentile: f64, tau: f64) -> Self {
        let rates = confusion_rates(s, tau);
        Self {
            name: ThresholdName::for_percentile(percentile),
            percentile,
            tau,
            fnr: rates.fnr,
            fpr: rates.fpr,
        }
    }
}

/// Ratio of stress-regime degradation to calm-regime degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationResult {
    pub delta_calm: f64,
    pub delta_stress: f64,
    /// `None` when the calm regime shows no degradation.
    pub factor: Option<f64>,
}

impl AmplificationResult {
    pub fn is_defined(&self) -> bool {
        self.factor.is_some()
    }
}

pub fn amplification(delta_stress: f64, delta_calm: f64) -> AmplificationResult {
    let factor = (delta_calm > 0.0 && delta_stress.is_finite()).then(|| delta_stress / delta_calm);
    AmplificationResult {
        delta_calm,
        delta_stress,
        factor,
    }
}
