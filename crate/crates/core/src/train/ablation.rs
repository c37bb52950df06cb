//! Grids of config overrides, each cell trained and evaluated independently.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use thiserror::Error;

use super::{build_model, train, TrainError};
use crate::config::TrainConfig;
use crate::data::Splits;
use crate::infer::{run_eval, EvalConfig};
use crate::metrics::{AttackerConfig, MetricsReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("empty grid spec")]
    Empty,
    #[error("grid axis `{0}`: expected `key=v1,v2,...`")]
    Syntax(String),
    #[error("grid axis `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("grid key `{0}` appears twice")]
    Duplicate(String),
}

/// Cartesian product of config-key axes; the first axis varies slowest.
///
/// Grid syntax: `;`-separated axes, each `key=v1,v2,...`. The token
/// `toggles` expands to the three on/off component switches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl FromStr for Grid {
    type Err = GridError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for token in spec.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            let new: Vec<(String, Vec<String>)> = if token == "toggles" {
                ["toggles.fair", "toggles.orth", "toggles.noise"]
                    .iter()
                    .map(|k| (k.to_string(), vec!["off".into(), "on".into()]))
                    .collect()
            } else {
                let (k, vs) = token.split_once('=').ok_or_else(|| GridError::Syntax(token.into()))?;
                let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
                if values.iter().any(String::is_empty) {
                    return Err(GridError::Syntax(token.into()));
                }
                vec![(k.trim().to_string(), values)]
            };
            for (key, values) in new {
                if axes.iter().any(|(k, _)| *k == key) {
                    return Err(GridError::Duplicate(key));
                }
                let mut probe = TrainConfig::default();
                for v in &values {
                    probe
                        .set(&key, v)
                        .map_err(|msg| GridError::Value { key: key.clone(), msg })?;
                }
                axes.push((key, values));
            }
        }
        if axes.is_empty() {
            return Err(GridError::Empty);
        }
        Ok(Grid { axes })
    }
}

impl Grid {
    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assignments of cell `index`, one per axis.
    pub fn cell(&self, mut index: usize) -> Vec<(String, String)> {
        let mut out = vec![(String::new(), String::new()); self.axes.len()];
        for (slot, (k, vs)) in out.iter_mut().zip(&self.axes).rev() {
            *slot = (k.clone(), vs[index % vs.len()].clone());
            index /= vs.len();
        }
        out
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("cell");
        for (k, _) in &self.axes {
            h.push(',');
            h.push_str(k);
        }
        for k in MetricsReport::KEYS {
            h.push(',');
            h.push_str(k);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: usize,
    pub assignments: Vec<(String, String)>,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let mut line = self.cell.to_string();
        for (_, v) in &self.assignments {
            line.push(',');
            line.push_str(v);
        }
        for v in self.report.values() {
            let _ = write!(line, ",{v:.4}");
        }
        line
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.assignments.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn run_cell(base: &TrainConfig, grid: &Grid, index: usize, splits: &Splits) -> Result<AblationRow, TrainError> {
    let assignments = grid.cell(index);
    let mut cfg = *base;
    for (k, v) in &assignments {
        cfg.set(k, v).map_err(TrainError::Config)?;
    }
    let model = build_model(&cfg, splits)?;
    let outcome = train(model, &splits.train, &splits.val, &cfg)?;
    let eval = EvalConfig {
        draws: cfg.draws,
        seed: cfg.seed,
        attacker: AttackerConfig {
            hidden_layers: cfg.attacker_hidden_layers,
            seed: cfg.seed,
            ..Default::default()
        },
    };
    let report = run_eval(&outcome.best, &splits.test, &splits.train, &eval)?.report;
    Ok(AblationRow {
        cell: index,
        assignments,
        report,
    })
}

/// Trains and evaluates every cell on up to `jobs` worker threads.
///
/// Cells own their RNG streams, so results do not depend on `jobs`.
/// `on_row` sees rows in cell order as soon as every earlier cell is done.
/// On error, rows finished before the failing cell are still reported.
pub fn run_ablation_grid(
    base: &TrainConfig,
    grid: &Grid,
    splits: &Splits,
    jobs: usize,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>, TrainError> {
    let total = grid.len();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    let mut slots: Vec<Option<Result<AblationRow, TrainError>>> = (0..total).map(|_| None).collect();
    let mut rows = Vec::with_capacity(total);

    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, total.max(1)) {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                let res = run_cell(base, grid, i, splits);
                if res.is_err() {
                    stop.store(true, Ordering::Relaxed);
                }
                if tx.send((i, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut flushed = 0;
        for (i, res) in rx {
            slots[i] = Some(res);
            while flushed < total {
                match slots[flushed].take() {
                    Some(Ok(row)) => {
                        on_row(&row);
                        rows.push(row);
                        flushed += 1;
                    }
                    Some(Err(e)) => {
                        slots[flushed] = Some(Err(e));
                        break;
                    }
                    None => break,
                }
            }
        }
    });

    match slots.into_iter().flatten().find_map(Result::err) {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}
