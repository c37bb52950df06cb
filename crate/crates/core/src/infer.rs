//! Single-draw and k-draw majority-vote prediction, fused-embedding export and
//! the full evaluation report.

use std::fmt::Write as _;

use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::metrics::{
    argmax, attacker_accuracy, prediction_metrics, AttackerConfig, EvalRecord, MetricError, MetricsReport,
};
use crate::model::{Model, ModelError};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("draws must be >= 1")]
    NoDraws,
    #[error("dataset has {got} features, checkpoint expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("label {label} exceeds the checkpoint's {classes} {what} classes")]
    Label {
        what: &'static str,
        label: usize,
        classes: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Rows per forward pass; bounds tape memory.
const CHUNK: usize = 1024;

/// Predictions plus the fused embedding of the first draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ids: Vec<String>,
    pub records: Vec<EvalRecord>,
    /// `e_f[n × fused_width]`
    pub fused: Tensor,
}

fn check_dims(model: &Model, ds: &Dataset) -> Result<(), InferError> {
    let expected = model.arch.encoder.input_dim;
    if ds.dim() != expected {
        return Err(InferError::Dimension {
            expected,
            got: ds.dim(),
        });
    }
    for (what, labels, classes) in [
        ("task", &ds.y, model.arch.task_classes),
        ("sensitive", &ds.s, model.arch.sens_classes),
    ] {
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(InferError::Label { what, label, classes });
        }
    }
    Ok(())
}

/// One noisy forward pass over the whole dataset: per-row softmax and `e_f`.
fn draw(model: &Model, x: &Tensor, rng: &mut Rng) -> Result<(Tensor, Tensor), InferError> {
    let (n, k, w) = (x.rows(), model.arch.task_classes, model.fused_width());
    let mut probs = Vec::with_capacity(n * k);
    let mut fused = Vec::with_capacity(n * w);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &x.select_rows(chunk), rng)?;
        let p = tape.softmax_rows(out.task_logits).map_err(ModelError::from)?;
        probs.extend_from_slice(tape.value(p).data());
        fused.extend_from_slice(tape.value(out.e_f).data());
    }
    Ok((
        Tensor::from_parts(vec![n, k], probs),
        Tensor::from_parts(vec![n, w], fused),
    ))
}

/// The plain inference path: one noise draw, argmax prediction.
pub fn predict_single(model: &Model, ds: &Dataset, seed: u64) -> Result<Prediction, InferError> {
    check_dims(model, ds)?;
    let (probs, fused) = draw(model, &ds.x, &mut rng::stream(seed, Stream::EvalNoise, 0))?;
    let records = (0..ds.len())
        .map(|i| EvalRecord {
            y_true: ds.y[i],
            y_pred: argmax(probs.row(i)),
            s: ds.s[i],
            probs: probs.row(i).to_vec(),
        })
        .collect();
    Ok(Prediction {
        ids: ds.ids.clone(),
        records,
        fused,
    })
}

/// Majority vote; ties go to the higher mean probability, then the lower index.
fn vote(votes: &[usize], mean: &[f64]) -> usize {
    let top = *votes.iter().max().expect("at least one class");
    let mut best = None::<usize>;
    for c in (0..votes.len()).filter(|&c| votes[c] == top) {
        if best.is_none_or(|b| mean[c] > mean[b]) {
            best = Some(c);
        }
    }
    best.expect("a class has the top vote count")
}

/// `draws` independent noise draws per sample aggregated by majority vote.
///
/// Draw `j` uses eval-noise stream `j` of `seed`, so draw 0 coincides with
/// [`predict_single`]. Records carry the mean softmax over draws and the
/// exported embedding is the first draw's.
pub fn predict(model: &Model, ds: &Dataset, draws: usize, seed: u64) -> Result<Prediction, InferError> {
    if draws == 0 {
        return Err(InferError::NoDraws);
    }
    check_dims(model, ds)?;
    let (n, k) = (ds.len(), model.arch.task_classes);
    let mut votes = vec![0usize; n * k];
    let mut sums = vec![0.0f64; n * k];
    let mut fused = None;
    for j in 0..draws {
        let (probs, e_f) = draw(model, &ds.x, &mut rng::stream(seed, Stream::EvalNoise, j as u32))?;
        for i in 0..n {
            let row = probs.row(i);
            votes[i * k + argmax(row)] += 1;
            for c in 0..k {
                sums[i * k + c] += row[c];
            }
        }
        fused.get_or_insert(e_f);
    }
    let records = (0..n)
        .map(|i| {
            let mean: Vec<f64> = sums[i * k..(i + 1) * k].iter().map(|v| v / draws as f64).collect();
            EvalRecord {
                y_true: ds.y[i],
                y_pred: vote(&votes[i * k..(i + 1) * k], &mean),
                s: ds.s[i],
                probs: mean,
            }
        })
        .collect();
    Ok(Prediction {
        ids: ds.ids.clone(),
        records,
        fused: fused.expect("draws >= 1"),
    })
}

/// CSV `id,y_true,s,y_pred,p_0,…,p_{K-1}`.
pub fn prediction_csv(pred: &Prediction) -> String {
    let k = pred.records.first().map_or(0, |r| r.probs.len());
    let mut out = String::from("id,y_true,s,y_pred");
    for c in 0..k {
        let _ = write!(out, ",p_{c}");
    }
    out.push('\n');
    for (id, r) in pred.ids.iter().zip(&pred.records) {
        let _ = write!(out, "{id},{},{},{}", r.y_true, r.s, r.y_pred);
        for p in &r.probs {
            let _ = write!(out, ",{p:.16e}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub draws: usize,
    pub seed: u64,
    pub attacker: AttackerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            draws: 1,
            seed: 0,
            attacker: AttackerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub prediction: Prediction,
}

/// Predicts on `eval`, then trains the attacker on embeddings exported from
/// `attack_train` and scores it on the embeddings of `eval`.
///
/// Sensitive labels are used for scoring only; the model never sees them.
pub fn run_eval(
    model: &Model,
    eval: &Dataset,
    attack_train: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalOutcome, InferError> {
    let prediction = predict(model, eval, cfg.draws, cfg.seed)?;
    let metrics = prediction_metrics(&prediction.records)?;
    let train_export = predict_single(model, attack_train, rng::child_seed(cfg.seed, 1))?;
    let attack = attacker_accuracy(
        &train_export.fused,
        &attack_train.s,
        &prediction.fused,
        &eval.s,
        &cfg.attacker,
    )?;
    Ok(EvalOutcome {
        report: MetricsReport::new(metrics, attack.att_acc, attack.balanced_att_acc),
        prediction,
    })
}
