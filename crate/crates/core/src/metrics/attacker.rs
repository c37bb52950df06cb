//! Post-hoc probe that predicts the sensitive attribute from embeddings.

use rand::seq::SliceRandom;

use super::{accuracy, argmax, balanced_accuracy, EvalRecord, MetricError};
use crate::autodiff::{Tape, Tensor};
use crate::losses::cross_entropy;
use crate::model::Head;
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackerConfig {
    pub hidden_layers: usize,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without sufficient train-accuracy gain before stopping.
    pub patience: usize,
    /// Gain in train accuracy (×100 scale) that resets the patience counter.
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 1,
            optimizer: AdamWConfig::default(),
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            min_improvement: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackOutcome {
    pub att_acc: f64,
    pub balanced_att_acc: f64,
    pub epochs: usize,
}

fn logits(head: &Head, x: &Tensor) -> Result<Tensor, MetricError> {
    let mut tape = Tape::new();
    let bound = head.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = bound
        .forward(&mut tape, xv)
        .map_err(|e| MetricError::Unsupported(e.to_string()))?;
    Ok(tape.value(out).clone())
}

fn records(head: &Head, x: &Tensor, s: &[usize]) -> Result<Vec<EvalRecord>, MetricError> {
    let l = logits(head, x)?;
    Ok((0..s.len())
        .map(|i| EvalRecord {
            y_true: s[i],
            y_pred: argmax(l.row(i)),
            s: s[i],
            probs: Vec::new(),
        })
        .collect())
}

/// Trains a fresh MLP on `(train_x, train_s)` and scores it on the test pair.
///
/// Stops once train accuracy has not improved by more than
/// `min_improvement` for `patience` consecutive epochs, or at `max_epochs`.
pub fn attacker_accuracy(
    train_x: &Tensor,
    train_s: &[usize],
    test_x: &Tensor,
    test_s: &[usize],
    cfg: &AttackerConfig,
) -> Result<AttackOutcome, MetricError> {
    if train_s.is_empty() || test_s.is_empty() {
        return Err(MetricError::Empty);
    }
    if train_s.iter().all(|&g| g == train_s[0]) {
        return Err(MetricError::DegenerateSensitive);
    }
    let groups = train_s.iter().chain(test_s).max().map_or(0, |m| m + 1);
    let dim = train_x.cols();
    let mut head = Head::init(
        &mut rng::stream(cfg.seed, Stream::AttackerInit, 0),
        dim,
        cfg.hidden_layers,
        groups,
    );
    let mut shuffle = rng::stream(cfg.seed, Stream::AttackerShuffle, 0);
    let mut state = OptimizerState::new();
    let mut order: Vec<usize> = (0..train_s.len()).collect();
    let (mut best, mut stall, mut epochs) = (f64::NEG_INFINITY, 0, 0);

    while epochs < cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let labels: Vec<usize> = batch.iter().map(|&i| train_s[i]).collect();
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let xv = tape.constant(train_x.select_rows(batch));
            let out = bound
                .forward(&mut tape, xv)
                .map_err(|e| MetricError::Unsupported(e.to_string()))?;
            let loss = cross_entropy(&mut tape, out, &labels).map_err(|e| MetricError::Unsupported(e.to_string()))?;
            let vars = bound.vars();
            let grads = tape
                .backward(loss, &vars)
                .map_err(|e| MetricError::Unsupported(e.to_string()))?;
            let grads: Vec<&Tensor> = vars.iter().map(|v| grads.get(*v).expect("requested")).collect();
            adamw_step(head.named_mut("attacker"), &grads, &mut state, &cfg.optimizer)
                .map_err(|e| MetricError::Unsupported(e.to_string()))?;
        }
        let train_acc = accuracy(&records(&head, train_x, train_s)?)?;
        if train_acc > best + cfg.min_improvement {
            best = train_acc;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }

    let test = records(&head, test_x, test_s)?;
    Ok(AttackOutcome {
        att_acc: accuracy(&test)?,
        balanced_att_acc: balanced_accuracy(&test)?,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn noise_features(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Stream::DataGen, 0);
        Tensor::from_parts(vec![n, d], (0..n * d).map(|_| r.sample(StandardNormal)).collect())
    }

    fn labels(n: usize, seed: u64, p: f64) -> Vec<usize> {
        let mut r = rng::stream(seed, Stream::DataGen, 1);
        (0..n).map(|_| usize::from(r.random::<f64>() < p)).collect()
    }

    #[test]
    fn copied_attribute_is_recovered() {
        let (n, d) = (600, 6);
        let s_tr = labels(n, 1, 0.5);
        let s_te = labels(n, 2, 0.5);
        let embed = |s: &[usize], seed| {
            let mut x = noise_features(n, d, seed);
            let mut data = x.data().to_vec();
            for (i, &g) in s.iter().enumerate() {
                data[i * d] = 3.0 * (2.0 * g as f64 - 1.0);
            }
            x = Tensor::new(vec![n, d], data).unwrap();
            x
        };
        let out = attacker_accuracy(
            &embed(&s_tr, 3),
            &s_tr,
            &embed(&s_te, 4),
            &s_te,
            &AttackerConfig::default(),
        )
        .unwrap();
        assert!(out.att_acc >= 99.0, "{out:?}");
    }

    #[test]
    fn independent_features_give_base_rate() {
        let n = 1000;
        let mut accs = Vec::new();
        for seed in 0..3 {
            let s_tr = labels(n, 10 + seed, 0.7);
            let s_te = labels(n, 20 + seed, 0.7);
            let cfg = AttackerConfig {
                seed,
                ..Default::default()
            };
            let out = attacker_accuracy(
                &noise_features(n, 8, 30 + seed),
                &s_tr,
                &noise_features(n, 8, 40 + seed),
                &s_te,
                &cfg,
            )
            .unwrap();
            let majority = 100.0 * s_te.iter().filter(|&&g| g == 1).count() as f64 / n as f64;
            accs.push((out.att_acc - majority).abs());
        }
        assert!(accs.iter().all(|&gap| gap <= 3.0), "{accs:?}");
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = noise_features(10, 2, 0);
        let s = vec![1; 10];
        assert_eq!(
            attacker_accuracy(&x, &s, &x, &s, &AttackerConfig::default()),
            Err(MetricError::DegenerateSensitive)
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let x = noise_features(200, 4, 5);
        let s = labels(200, 6, 0.5);
        let cfg = AttackerConfig::default();
        assert_eq!(
            attacker_accuracy(&x, &s, &x, &s, &cfg).unwrap(),
            attacker_accuracy(&x, &s, &x, &s, &cfg).unwrap()
        );
    }
}
