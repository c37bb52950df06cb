//! Joint training of adapters and heads, plus the ablation grid runner.

mod ablation;

pub use ablation::{run_ablation_grid, AblationRow, Grid, GridError};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::config::TrainConfig;
use crate::data::{Dataset, Split, Splits};
use crate::infer::InferError;
use crate::losses::{cross_entropy, dp_loss_from_logits, orthogonality_loss, total_loss, LossError, LossTerms};
use crate::metrics::{
    accuracy, argmax, balanced_accuracy, demographic_parity, equal_opportunity, equalized_odds, EvalRecord,
};
use crate::model::{Model, ModelError};
use crate::optim::{adamw_step, OptimError, OptimizerState};
use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("numerical abort at epoch {epoch}, batch {batch}: {reason}")]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        reason: String,
        /// Parameters before the offending step.
        last_good: Box<Model>,
    },
    #[error("loss breakdown mismatch: total {total} vs weighted sum {weighted}")]
    Breakdown { total: f64, weighted: f64 },
}

/// One row of the training log. Metric cells are `None` when undefined on
/// the rows seen (e.g. an empty `(y, s)` cell).
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub task_ce: f64,
    pub sens_ce: f64,
    pub orth: f64,
    pub dp: f64,
    pub acc: Option<f64>,
    pub bacc: Option<f64>,
    pub dp_metric: Option<f64>,
    pub eopp: Option<f64>,
    pub eo: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,split,task_ce,sens_ce,orth,dp,acc,bacc,dp_metric,eopp,eo";

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.8},{:.8},{:.8},{:.8},{},{},{},{},{}",
                r.epoch,
                r.split,
                r.task_ce,
                r.sens_ce,
                r.orth,
                r.dp,
                cell(r.acc),
                cell(r.bacc),
                cell(r.dp_metric),
                cell(r.eopp),
                cell(r.eo)
            );
        }
        out
    }

    /// Training-split rows in epoch order.
    pub fn train_rows(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.split == Split::Train)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation task accuracy.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Parameters after the final epoch.
    pub last: Model,
    pub log: TrainingLog,
}

/// `(task classes, sensitive classes)` over all splits, at least two each.
pub fn label_cardinalities(splits: &Splits) -> (usize, usize) {
    let (mut k, mut g) = (2, 2);
    for ds in [&splits.train, &splits.val, &splits.test] {
        let (dk, dg) = ds.cardinalities();
        k = k.max(dk);
        g = g.max(dg);
    }
    (k, g)
}

/// Fresh model shaped by `cfg` and the data, noise per the toggles.
pub fn build_model(cfg: &TrainConfig, splits: &Splits) -> Result<Model, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let (k, g) = label_cardinalities(splits);
    let arch = cfg.architecture(splits.train.dim(), k, g);
    Ok(Model::init(arch, cfg.effective_noise(), cfg.seed)?)
}

fn metric_cells(records: &[EvalRecord]) -> [Option<f64>; 5] {
    [
        accuracy(records).ok(),
        balanced_accuracy(records).ok(),
        demographic_parity(records).ok(),
        equal_opportunity(records).ok(),
        equalized_odds(records).ok(),
    ]
}

/// Sum over batches of `(value × batch size)`, divided out at the end.
#[derive(Default)]
struct Running {
    n: usize,
    sums: [f64; 4],
}

impl Running {
    fn add(&mut self, n: usize, vals: [f64; 4]) {
        self.n += n;
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v * n as f64;
        }
    }

    fn means(&self) -> [f64; 4] {
        self.sums.map(|s| s / self.n.max(1) as f64)
    }
}

/// Validation losses and metrics from one deterministic noise draw.
fn validate(model: &Model, val: &Dataset, seed: u64, epoch: usize, cfg: &TrainConfig) -> Result<LogRow, TrainError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut r = rng::stream(rng::child_seed(seed, epoch as u64), Stream::EvalNoise, 0);
    let out = model.forward(&mut tape, &bound, &val.x, &mut r)?;
    let terms = loss_terms(&mut tape, &out, &val.y, &val.s)?;
    let (_, b) = total_loss(&mut tape, &terms, &cfg.effective_weights())?;
    let [acc, bacc, dp_metric, eopp, eo] = metric_cells(&records(tape.value(out.task_logits), val, None));
    Ok(LogRow {
        epoch,
        split: Split::Val,
        task_ce: b.task_ce,
        sens_ce: b.sens_ce,
        orth: b.orth,
        dp: b.dp,
        acc,
        bacc,
        dp_metric,
        eopp,
        eo,
    })
}

/// Argmax records for `logits`, whose rows are `rows` of `ds` (all rows if `None`).
fn records(logits: &Tensor, ds: &Dataset, rows: Option<&[usize]>) -> Vec<EvalRecord> {
    (0..logits.rows())
        .map(|r| {
            let i = rows.map_or(r, |rows| rows[r]);
            EvalRecord {
                y_true: ds.y[i],
                y_pred: argmax(logits.row(r)),
                s: ds.s[i],
                probs: Vec::new(),
            }
        })
        .collect()
}

fn loss_terms(
    tape: &mut Tape,
    out: &crate::model::ForwardOutputs,
    y: &[usize],
    s: &[usize],
) -> Result<LossTerms, LossError> {
    Ok(LossTerms {
        task_ce: cross_entropy(tape, out.task_logits, y)?,
        sens_ce: cross_entropy(tape, out.sens_logits, s)?,
        orth: orthogonality_loss(tape, out.e_t, out.e_s)?,
        dp: dp_loss_from_logits(tape, out.task_logits, s)?,
    })
}

/// Trains the adapters and heads of `model` on `train`, selecting the
/// checkpoint with the best validation accuracy.
///
/// Frozen encoder weights enter the tape as constants and are never updated.
/// Loss weights come from `cfg` after toggles; the model's own noise config is
/// used as is (see [`build_model`]).
pub fn train(mut model: Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let w = cfg.effective_weights();
    let mut shuffle = rng::stream(cfg.seed, Stream::DataShuffle, 0);
    let mut noise = rng::stream(cfg.seed, Stream::Noise, 0);
    let val_seed = rng::child_seed(cfg.seed, u64::from(Stream::EvalNoise as u32));
    let mut state = OptimizerState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut running = Running::default();
        let mut seen = Vec::with_capacity(train.len());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = train.x.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let s: Vec<usize> = batch.iter().map(|&i| train.s[i]).collect();

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &x, &mut noise)?;
            let terms = loss_terms(&mut tape, &out, &y, &s)?;
            let (loss, breakdown) = total_loss(&mut tape, &terms, &w)?;

            let abort = |reason: String, model: &Model| TrainError::NumericalAbort {
                epoch,
                batch: b,
                reason,
                last_good: Box::new(model.clone()),
            };
            if !breakdown.total.is_finite() {
                return Err(abort(format!("non-finite loss {:?}", breakdown), &model));
            }
            let weighted = breakdown.weighted_sum(&w);
            if (breakdown.total - weighted).abs() > 1e-12 * breakdown.total.abs().max(1.0) {
                return Err(TrainError::Breakdown {
                    total: breakdown.total,
                    weighted,
                });
            }

            seen.extend(records(tape.value(out.task_logits), train, Some(batch)));
            running.add(
                batch.len(),
                [breakdown.task_ce, breakdown.sens_ce, breakdown.orth, breakdown.dp],
            );

            let vars = bound.trainable();
            let grads = tape.backward(loss, &vars).map_err(ModelError::from)?;
            let grads: Vec<&Tensor> = vars.iter().map(|v| grads.get(*v).expect("requested")).collect();
            if let Err(e @ OptimError::NonFiniteGradient { .. }) =
                adamw_step(model.params.named_trainable_mut(), &grads, &mut state, &cfg.optimizer)
            {
                return Err(abort(e.to_string(), &model));
            }
        }

        let [task_ce, sens_ce, orth, dp] = running.means();
        let [acc, bacc, dp_metric, eopp, eo] = metric_cells(&seen);
        log.rows.push(LogRow {
            epoch,
            split: Split::Train,
            task_ce,
            sens_ce,
            orth,
            dp,
            acc,
            bacc,
            dp_metric,
            eopp,
            eo,
        });

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let row = validate(&model, val, val_seed, epoch, cfg)?;
            let val_acc = row.acc.unwrap_or(0.0);
            if best.as_ref().is_none_or(|(_, _, a)| val_acc > *a) {
                best = Some((model.clone(), epoch, val_acc));
            }
            log.rows.push(row);
        }
    }

    let (best, best_epoch, best_val_acc) = best.expect("final epoch is always validated");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_acc,
        last: model,
        log,
    })
}
