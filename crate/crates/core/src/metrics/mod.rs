//! Task-performance and group-fairness metrics on the ×100 reporting scale.

mod attacker;

pub use attacker::{attacker_accuracy, AttackOutcome, AttackerConfig};

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no records")]
    Empty,
    #[error("true class {0} has no records; balanced accuracy is undefined")]
    AbsentClass(usize),
    #[error("only one sensitive group present ({0}); gaps need at least two")]
    SingleGroup(usize),
    #[error("no records with y={y}, s={s}")]
    EmptyCell { y: usize, s: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("sensitive labels take a single value; attacker accuracy is undefined")]
    DegenerateSensitive,
    #[error("malformed metrics report: {0}")]
    Parse(String),
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub y_true: usize,
    pub y_pred: usize,
    pub s: usize,
    pub probs: Vec<f64>,
}

/// Index of the largest value, ties toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn num_classes(records: &[EvalRecord]) -> usize {
    records
        .iter()
        .map(|r| r.probs.len().max(r.y_true + 1).max(r.y_pred + 1))
        .max()
        .unwrap_or(0)
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = records.iter().filter(|r| r.y_pred == r.y_true).count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Mean per-class recall over all declared classes.
pub fn balanced_accuracy(records: &[EvalRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let k = num_classes(records);
    let mut total = vec![0usize; k];
    let mut hit = vec![0usize; k];
    for r in records {
        total[r.y_true] += 1;
        if r.y_pred == r.y_true {
            hit[r.y_true] += 1;
        }
    }
    let mut sum = 0.0;
    for c in 0..k {
        if total[c] == 0 {
            return Err(MetricError::AbsentClass(c));
        }
        sum += hit[c] as f64 / total[c] as f64;
    }
    Ok(100.0 * sum / k as f64)
}

/// `max_s P(Ŷ=1|S=s) − min_s P(Ŷ=1|S=s)`.
pub fn demographic_parity(records: &[EvalRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let groups: BTreeSet<usize> = records.iter().map(|r| r.s).collect();
    if groups.len() < 2 {
        return Err(MetricError::SingleGroup(*groups.first().unwrap()));
    }
    let rates: Vec<f64> = groups
        .iter()
        .map(|&g| {
            let (n, pos) = records
                .iter()
                .filter(|r| r.s == g)
                .fold((0usize, 0usize), |(n, p), r| (n + 1, p + usize::from(r.y_pred == 1)));
            pos as f64 / n as f64
        })
        .collect();
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(100.0 * (max - min))
}

/// `P(Ŷ=1 | Y=y, S=0) − P(Ŷ=1 | Y=y, S=1)` for binary task and groups.
fn conditional_gap(records: &[EvalRecord], y: usize) -> Result<f64, MetricError> {
    if num_classes(records) > 2 {
        return Err(MetricError::Unsupported(
            "EO and EOpp condition on a binary task label".into(),
        ));
    }
    if let Some(r) = records.iter().find(|r| r.s > 1) {
        return Err(MetricError::Unsupported(format!(
            "EO and EOpp need binary sensitive groups, found s={}",
            r.s
        )));
    }
    let mut rate = [0.0; 2];
    for (s, slot) in rate.iter_mut().enumerate() {
        let (n, pos) = records
            .iter()
            .filter(|r| r.y_true == y && r.s == s)
            .fold((0usize, 0usize), |(n, p), r| (n + 1, p + usize::from(r.y_pred == 1)));
        if n == 0 {
            return Err(MetricError::EmptyCell { y, s });
        }
        *slot = pos as f64 / n as f64;
    }
    Ok(rate[0] - rate[1])
}

/// `½ Σ_{y∈{0,1}} |TPR/FPR gap|`.
pub fn equalized_odds(records: &[EvalRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let fpr = conditional_gap(records, 0)?.abs();
    let tpr = conditional_gap(records, 1)?.abs();
    Ok(100.0 * 0.5 * (fpr + tpr))
}

/// `|TPR₀ − TPR₁|`.
pub fn equal_opportunity(records: &[EvalRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(100.0 * conditional_gap(records, 1)?.abs())
}

/// Prediction-level metrics only (the attacker fields of a report).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub dp: f64,
    pub eopp: f64,
    pub eo: f64,
}

pub fn prediction_metrics(records: &[EvalRecord]) -> Result<PredictionMetrics, MetricError> {
    Ok(PredictionMetrics {
        acc: accuracy(records)?,
        bacc: balanced_accuracy(records)?,
        dp: demographic_parity(records)?,
        eopp: equal_opportunity(records)?,
        eo: equalized_odds(records)?,
    })
}

/// Full evaluation report, every field on the ×100 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub bacc: f64,
    pub dp: f64,
    pub eopp: f64,
    pub eo: f64,
    pub att_acc: f64,
    pub balanced_att_acc: f64,
}

impl MetricsReport {
    pub const KEYS: [&'static str; 7] = ["acc", "bacc", "dp", "eopp", "eo", "att_acc", "balanced_att_acc"];

    pub fn new(p: PredictionMetrics, att_acc: f64, balanced_att_acc: f64) -> Self {
        Self {
            acc: p.acc,
            bacc: p.bacc,
            dp: p.dp,
            eopp: p.eopp,
            eo: p.eo,
            att_acc,
            balanced_att_acc,
        }
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.acc,
            self.bacc,
            self.dp,
            self.eopp,
            self.eo,
            self.att_acc,
            self.balanced_att_acc,
        ]
    }

    /// `key=value` lines with four decimals, in [`Self::KEYS`] order.
    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v:.4}\n"))
            .collect()
    }

    pub fn from_kv(text: &str) -> Result<Self, MetricError> {
        let mut values = [None; 7];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MetricError::Parse(format!("no `=` in `{line}`")))?;
            let idx = Self::KEYS
                .iter()
                .position(|key| *key == k.trim())
                .ok_or_else(|| MetricError::Parse(format!("unknown key `{k}`")))?;
            values[idx] = Some(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| MetricError::Parse(format!("bad value `{v}`")))?,
            );
        }
        let get = |i: usize| values[i].ok_or_else(|| MetricError::Parse(format!("missing `{}`", Self::KEYS[i])));
        Ok(Self {
            acc: get(0)?,
            bacc: get(1)?,
            dp: get(2)?,
            eopp: get(3)?,
            eo: get(4)?,
            att_acc: get(5)?,
            balanced_att_acc: get(6)?,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}
