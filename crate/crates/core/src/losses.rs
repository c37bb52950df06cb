//! Training objectives: task/sensitive cross-entropy, embedding orthogonality,
//! and the demographic-parity surrogate, plus their weighted sum.
//!
//! All losses are recorded on a [`Tape`] so their gradients come from the
//! same graph as the forward pass.

use thiserror::Error;

use crate::autodiff::{DiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("group label {group} at row {row} is not binary")]
    GroupOutOfRange { row: usize, group: usize },
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("negative loss weight {name}={value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Weights of the auxiliary terms. A zero weight keeps the term out of the
/// gradient graph entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sens_ce: f64,
    pub orth: f64,
    pub fair: f64,
}

impl LossWeights {
    pub fn new(sens_ce: f64, orth: f64, fair: f64) -> Result<Self, LossError> {
        for (name, value) in [("beta1", sens_ce), ("beta2", orth), ("beta3", fair)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(Self { sens_ce, orth, fair })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sens_ce: 1.0,
            orth: 0.1,
            fair: 0.3,
        }
    }
}

/// Scalar values of each term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub task_ce: f64,
    pub sens_ce: f64,
    pub orth: f64,
    pub dp: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `task_ce + β₁·sens_ce + β₂·orth + β₃·dp` recomputed from the parts.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.task_ce + w.sens_ce * self.sens_ce + w.orth * self.orth + w.fair * self.dp
    }
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub task_ce: Var,
    pub sens_ce: Var,
    pub orth: Var,
    pub dp: Var,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(LossError::LabelCount {
            expected: rows,
            got: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange { row, label, classes });
    }
    Ok(())
}

/// `−(1/n) Σᵢ log softmax(logitsᵢ)[labelᵢ]` for `logits[n×K]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let (rows, classes) = (tape.value(logits).rows(), tape.value(logits).cols());
    check_labels(labels, rows, classes)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    let picked = tape.gather_rows(log_probs, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Mean squared per-row cosine similarity of `e_t[n×d]` and `e_s[n×d]`.
pub fn orthogonality_loss(tape: &mut Tape, e_t: Var, e_s: Var) -> Result<Var, LossError> {
    let cos = tape.cosine_rows(e_t, e_s)?;
    let sq = tape.square(cos);
    Ok(tape.mean(sq))
}

type GroupWeights = (Vec<f64>, Vec<f64>);

/// Per-group averaging weights: row `i` gets `1/n_g` if it is in group `g`.
/// Returns `None` when either binary group is empty.
fn group_weights(groups: &[usize]) -> Result<Option<GroupWeights>, LossError> {
    if let Some((row, &group)) = groups.iter().enumerate().find(|(_, &g)| g > 1) {
        return Err(LossError::GroupOutOfRange { row, group });
    }
    let n1 = groups.iter().filter(|&&g| g == 1).count();
    let n0 = groups.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Ok(None);
    }
    let w0 = groups
        .iter()
        .map(|&g| if g == 0 { 1.0 / n0 as f64 } else { 0.0 })
        .collect();
    let w1 = groups
        .iter()
        .map(|&g| if g == 1 { 1.0 / n1 as f64 } else { 0.0 })
        .collect();
    Ok(Some((w0, w1)))
}

fn zero_loss(tape: &mut Tape) -> Var {
    tape.constant(Tensor::zeros(&[]))
}

/// `|mean_{s=0}(p) − mean_{s=1}(p)|` for positive-class probabilities `p[n]`.
/// An empty group gives a constant 0 with no gradient.
pub fn dp_loss_binary(tape: &mut Tape, probs_pos: Var, groups: &[usize]) -> Result<Var, LossError> {
    let n = tape.value(probs_pos).len();
    if groups.len() != n {
        return Err(LossError::LabelCount {
            expected: n,
            got: groups.len(),
        });
    }
    let Some((w0, w1)) = group_weights(groups)? else {
        return Ok(zero_loss(tape));
    };
    let signed: Vec<f64> = w0.iter().zip(&w1).map(|(a, b)| a - b).collect();
    let signed = tape.constant(Tensor::from_parts(vec![n], signed));
    let weighted = tape.mul(probs_pos, signed)?;
    let gap = tape.sum(weighted);
    Ok(tape.abs(gap))
}

/// `Σ_k |mean_{s=0}(p_k) − mean_{s=1}(p_k)|` for class probabilities `p[n×K]`.
pub fn dp_loss_multiclass(tape: &mut Tape, probs: Var, groups: &[usize]) -> Result<Var, LossError> {
    let n = tape.value(probs).rows();
    if groups.len() != n {
        return Err(LossError::LabelCount {
            expected: n,
            got: groups.len(),
        });
    }
    let Some((w0, w1)) = group_weights(groups)? else {
        return Ok(zero_loss(tape));
    };
    let signed: Vec<f64> = w0.iter().zip(&w1).map(|(a, b)| a - b).collect();
    let signed = tape.constant(Tensor::from_parts(vec![1, n], signed));
    let gaps = tape.matmul(signed, probs)?;
    let abs = tape.abs(gaps);
    Ok(tape.sum(abs))
}

/// DP surrogate on task logits: binary form on the class-1 softmax column
/// for two classes, the per-class sum otherwise.
pub fn dp_loss_from_logits(tape: &mut Tape, logits: Var, groups: &[usize]) -> Result<Var, LossError> {
    let probs = tape.softmax_rows(logits)?;
    let (rows, classes) = (tape.value(probs).rows(), tape.value(probs).cols());
    if classes == 2 {
        let pos = tape.gather_rows(probs, &vec![1; rows])?;
        dp_loss_binary(tape, pos, groups)
    } else {
        dp_loss_multiclass(tape, probs, groups)
    }
}

/// Weighted sum of the terms. Terms with zero weight are left off the graph.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown), LossError> {
    let mut total = terms.task_ce;
    for (term, weight) in [(terms.sens_ce, w.sens_ce), (terms.orth, w.orth), (terms.dp, w.fair)] {
        if weight != 0.0 {
            let scaled = tape.scale(term, weight);
            total = tape.add(total, scaled)?;
        }
    }
    let item = |v: Var| tape.value(v).item().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        task_ce: item(terms.task_ce),
        sens_ce: item(terms.sens_ce),
        orth: item(terms.orth),
        dp: item(terms.dp),
        total: item(total),
    };
    Ok((total, breakdown))
}
