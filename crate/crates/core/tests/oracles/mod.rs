//! Independent oracles shared by the contract tests and the acceptance gate.
//! Each check returns a one-line summary on success and the first failure otherwise.

#![allow(dead_code)]

use fairnvt::autodiff::{Tape, Tensor, Var};
use fairnvt::config::TrainConfig;
use fairnvt::data::{generate, SynthConfig};
use fairnvt::losses::{cross_entropy, dp_loss_binary, dp_loss_multiclass, orthogonality_loss};
use fairnvt::metrics::{prediction_metrics, EvalRecord};
use fairnvt::model::{inject_noise, ClassifierInput, Model, NoiseConfig};
use fairnvt::rng::{self, Rng, Stream};
use fairnvt::train::{build_model, train};
use rand::Rng as _;

pub type Check = Result<String, String>;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-5;
/// Below this magnitude both gradients are compared absolutely (at `FD_REL_TOL * FLOOR`).
const FD_FLOOR: f64 = 1e-2;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Entries bounded away from 0 so `abs`/`relu` kinks are never straddled.
fn off_kink(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Rows whose norms straddle `clip` with a margin of at least 10%.
fn straddling_rows(rng: &mut Rng, rows: usize, cols: usize, clip: f64) -> Tensor {
    let mut data = Vec::new();
    for i in 0..rows {
        let dir: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = if i % 2 == 0 {
            clip * rng.random_range(1.1..3.0)
        } else {
            clip * rng.random_range(0.1..0.9)
        };
        data.extend(dir.iter().map(|v| v * target / norm));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn groups(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut g: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    g[0] = 0;
    g[1] = 1;
    g
}

fn cases(seed: u64) -> Vec<Case> {
    let mut r = rng::stream(seed, Stream::ParamInit, 77);
    let r = &mut r;
    let (n, d, k) = (5, 4, 3);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let picks: Vec<usize> = (0..n).map(|_| r.random_range(0..d)).collect();
    let g_bin = groups(r, n);
    let g_multi = groups(r, n);
    let clip = 1.5;
    let case = |name, inputs, build: Build| Case { name, inputs, build };
    vec![
        case(
            "matmul",
            vec![matrix(r, n, d, -1.0, 1.0), matrix(r, d, k, -1.0, 1.0)],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        case(
            "add",
            vec![matrix(r, n, d, -1.0, 1.0), matrix(r, n, d, -1.0, 1.0)],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        case(
            "sub",
            vec![matrix(r, n, d, -1.0, 1.0), matrix(r, n, d, -1.0, 1.0)],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        case(
            "mul",
            vec![matrix(r, n, d, -1.0, 1.0), matrix(r, n, d, -1.0, 1.0)],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        case(
            "add_bias",
            vec![
                matrix(r, n, d, -1.0, 1.0),
                Tensor::vector((0..d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap(),
            ],
            Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
        ),
        case(
            "scale",
            vec![matrix(r, n, d, -1.0, 1.0)],
            Box::new(|t, v| t.scale(v[0], -2.5)),
        ),
        case("tanh", vec![matrix(r, n, d, -2.0, 2.0)], Box::new(|t, v| t.tanh(v[0]))),
        case("relu", vec![off_kink(r, n, d)], Box::new(|t, v| t.relu(v[0]))),
        case(
            "square",
            vec![matrix(r, n, d, -2.0, 2.0)],
            Box::new(|t, v| t.square(v[0])),
        ),
        case("abs", vec![off_kink(r, n, d)], Box::new(|t, v| t.abs(v[0]))),
        case(
            "log",
            vec![matrix(r, n, d, 0.2, 3.0)],
            Box::new(|t, v| t.log(v[0]).unwrap()),
        ),
        case(
            "softmax_rows",
            vec![matrix(r, n, k, -3.0, 3.0)],
            Box::new(|t, v| t.softmax_rows(v[0]).unwrap()),
        ),
        case(
            "log_softmax_rows",
            vec![matrix(r, n, k, -3.0, 3.0)],
            Box::new(|t, v| t.log_softmax_rows(v[0]).unwrap()),
        ),
        case("sum", vec![matrix(r, n, d, -1.0, 1.0)], Box::new(|t, v| t.sum(v[0]))),
        case("mean", vec![matrix(r, n, d, -1.0, 1.0)], Box::new(|t, v| t.mean(v[0]))),
        case(
            "l2_clip",
            vec![straddling_rows(r, n, d, clip)],
            Box::new(move |t, v| t.l2_clip(v[0], clip).unwrap()),
        ),
        case(
            "concat",
            vec![matrix(r, n, d, -1.0, 1.0), matrix(r, n, k, -1.0, 1.0)],
            Box::new(|t, v| t.concat(v[0], v[1]).unwrap()),
        ),
        case(
            "cosine_rows",
            vec![matrix(r, n, d, -1.0, 1.0), matrix(r, n, d, -1.0, 1.0)],
            Box::new(|t, v| t.cosine_rows(v[0], v[1]).unwrap()),
        ),
        case(
            "gather_rows",
            vec![matrix(r, n, d, -1.0, 1.0)],
            Box::new(move |t, v| t.gather_rows(v[0], &picks).unwrap()),
        ),
        case(
            "cross_entropy",
            vec![matrix(r, n, k, -3.0, 3.0)],
            Box::new(move |t, v| cross_entropy(t, v[0], &labels).unwrap()),
        ),
        case(
            "orthogonality_loss",
            vec![matrix(r, n, d, -1.0, 1.0), matrix(r, n, d, -1.0, 1.0)],
            Box::new(|t, v| orthogonality_loss(t, v[0], v[1]).unwrap()),
        ),
        case(
            "dp_loss_binary",
            vec![Tensor::vector((0..n).map(|_| r.random_range(0.05..0.95)).collect()).unwrap()],
            Box::new(move |t, v| dp_loss_binary(t, v[0], &g_bin).unwrap()),
        ),
        case(
            "dp_loss_multiclass",
            vec![matrix(r, n, k, 0.05, 0.95)],
            Box::new(move |t, v| dp_loss_multiclass(t, v[0], &g_multi).unwrap()),
        ),
    ]
}

/// Scalarizes the case output with fixed random weights: `Σ w ⊙ out`.
fn objective(case: &Case, inputs: &[Tensor], weights: &[f64]) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.build)(&mut tape, &leaves);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::new(shape, weights[..tape.value(out).len()].to_vec()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    (tape, leaves, loss)
}

fn objective_value(case: &Case, inputs: &[Tensor], weights: &[f64]) -> f64 {
    let (tape, _, loss) = objective(case, inputs, weights);
    tape.value(loss).item().unwrap()
}

fn check_case(case: &Case, seed: u64) -> Result<usize, String> {
    let mut r = rng::stream(seed, Stream::ParamInit, 78);
    let weights: Vec<f64> = (0..256).map(|_| r.random_range(0.5..1.5)).collect();
    let (tape, leaves, loss) = objective(case, &case.inputs, &weights);
    let grads = tape
        .backward(loss, &leaves)
        .map_err(|e| format!("{}: {e}", case.name))?;
    let mut checked = 0;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads
            .get(leaves[i])
            .ok_or_else(|| format!("{}: no gradient for input {i}", case.name))?;
        for j in 0..input.len() {
            let shifted = |delta: f64| {
                let mut data = input.data().to_vec();
                data[j] += delta;
                let mut inputs = case.inputs.clone();
                inputs[i] = Tensor::new(input.shape().to_vec(), data).unwrap();
                objective_value(case, &inputs, &weights)
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs()).max(FD_FLOOR);
            if (a - numeric).abs() > FD_REL_TOL * scale {
                return Err(format!(
                    "{} seed {seed} input {i}[{j}]: analytic {a:e} vs numeric {numeric:e}",
                    case.name
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Every differentiable op and all four losses against central differences.
pub fn gradient_suite(seeds: &[u64]) -> Check {
    let mut checked = 0;
    let mut names = 0;
    for &seed in seeds {
        let cases = cases(seed);
        names = cases.len();
        for case in &cases {
            checked += check_case(case, seed)?;
        }
    }
    Ok(format!(
        "{names} ops/losses, {} seeds, {checked} partials within rel {FD_REL_TOL:e}",
        seeds.len()
    ))
}

fn small_config(variant: ClassifierInput) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        variant,
        ..Default::default()
    };
    cfg.model.hidden_dim = 12;
    cfg.model.task_reduction = 3;
    cfg.model.sens_reduction = 4;
    cfg
}

fn small_splits(seed: u64) -> fairnvt::data::Splits {
    generate(&SynthConfig {
        n: 200,
        dim: 10,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Task CE sends exactly zero gradient to the sensitive adapter on random batches.
pub fn stop_gradient_contract(batches: usize) -> Check {
    let splits = small_splits(3);
    let mut model = build_model(&small_config(ClassifierInput::FairNvt), &splits).map_err(|e| e.to_string())?;
    // Up-projections start at zero; perturb every weight so a leak would show.
    let mut r = rng::stream(11, Stream::ParamInit, 1);
    for (_, t) in model.params.named_trainable_mut() {
        let data: Vec<f64> = t.data().iter().map(|_| r.random_range(-0.5..0.5)).collect();
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    let mut leaks_elsewhere = false;
    for b in 0..batches {
        let rows: Vec<usize> = (0..32).map(|_| r.random_range(0..splits.train.len())).collect();
        let x = splits.train.x.select_rows(&rows);
        let y: Vec<usize> = rows.iter().map(|&i| splits.train.y[i]).collect();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut noise = rng::stream(b as u64, Stream::Noise, 0);
        let out = model
            .forward(&mut tape, &bound, &x, &mut noise)
            .map_err(|e| e.to_string())?;
        let ce = cross_entropy(&mut tape, out.task_logits, &y).map_err(|e| e.to_string())?;
        let sens = bound.sensitive_adapter();
        let g = tape.backward(ce, &sens).map_err(|e| e.to_string())?;
        for v in &sens {
            if let Some(t) = g.get(*v) {
                if let Some(x) = t.data().iter().find(|x| **x != 0.0) {
                    return Err(format!("batch {b}: sensitive-adapter gradient {x:e}"));
                }
            }
        }
        let all = bound.trainable();
        let g = tape.backward(ce, &all).map_err(|e| e.to_string())?;
        leaks_elsewhere |= bound
            .task_adapter()
            .iter()
            .any(|v| g.get(*v).is_some_and(|t| t.data().iter().any(|x| *x != 0.0)));
    }
    if !leaks_elsewhere {
        return Err("task CE produced no gradient on the task adapter either; check is vacuous".into());
    }
    Ok(format!("{batches} batches, sensitive-adapter gradients exactly zero"))
}

/// Frozen-weight digest unchanged by a training run.
pub fn frozen_backbone_contract(epochs: usize) -> Check {
    let splits = small_splits(4);
    let mut cfg = small_config(ClassifierInput::FairNvt);
    cfg.epochs = epochs;
    let model = build_model(&cfg, &splits).map_err(|e| e.to_string())?;
    let before = model.params.frozen_digest();
    let trainable_before: Vec<Tensor> = model
        .params
        .named_trainable()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let out = train(model, &splits.train, &splits.val, &cfg).map_err(|e| e.to_string())?;
    if out.last.params.frozen_digest() != before {
        return Err("frozen weights changed".into());
    }
    let moved = out
        .last
        .params
        .named_trainable()
        .iter()
        .zip(&trainable_before)
        .any(|((_, a), b)| *a != b);
    if !moved {
        return Err("no trainable weight moved; check is vacuous".into());
    }
    Ok(format!("frozen digest identical after {epochs} epochs"))
}

pub struct NoiseStats {
    pub max_abs_mean: f64,
    pub min_var: f64,
    pub max_var: f64,
}

/// Monte-Carlo moments of the injected noise through the clip-then-noise path.
pub fn noise_moments(draws: usize, dim: usize, clip: f64, sigma: f64, seed: u64) -> NoiseStats {
    let cfg = NoiseConfig {
        sigma,
        clip,
        enabled: true,
    };
    let mut tape = Tape::new();
    let e = tape.leaf(Tensor::new(vec![draws, dim], vec![0.0; draws * dim]).unwrap());
    let mut r = rng::stream(seed, Stream::Noise, 0);
    let (_, noised) = inject_noise(&mut tape, e, &cfg, &mut r).unwrap();
    let v = tape.value(noised);
    let mut stats = NoiseStats {
        max_abs_mean: 0.0,
        min_var: f64::INFINITY,
        max_var: 0.0,
    };
    for c in 0..dim {
        let col: Vec<f64> = (0..draws).map(|i| v.row(i)[c]).collect();
        let mean = col.iter().sum::<f64>() / draws as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        stats.max_abs_mean = stats.max_abs_mean.max(mean.abs());
        stats.min_var = stats.min_var.min(var);
        stats.max_var = stats.max_var.max(var);
    }
    stats
}

pub fn noise_calibration() -> Check {
    let (clip, sigma) = (10.0, 5.0);
    let target = (clip * sigma) * (clip * sigma);
    let s = noise_moments(100_000, 4, clip, sigma, 0);
    let summary = format!(
        "max |mean| {:.4}, variance in [{:.1}, {:.1}] vs {target}",
        s.max_abs_mean, s.min_var, s.max_var
    );
    let var_ok = (s.min_var - target).abs() <= 0.02 * target && (s.max_var - target).abs() <= 0.02 * target;
    if s.max_abs_mean < 0.5 && var_ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Contingency-table recomputation of the prediction metrics (percent).
pub struct Brute {
    pub acc: f64,
    pub bacc: f64,
    pub dp: f64,
    pub eo: f64,
    pub eopp: f64,
}

pub fn brute_force(records: &[EvalRecord]) -> Brute {
    // table[y][s][ŷ]
    let mut t = [[[0.0f64; 2]; 2]; 2];
    for r in records {
        t[r.y_true][r.s][r.y_pred] += 1.0;
    }
    let n: f64 = t.iter().flatten().flatten().sum();
    let acc = (t[0][0][0] + t[0][1][0] + t[1][0][1] + t[1][1][1]) / n;
    let recall = |y: usize| (t[y][0][y] + t[y][1][y]) / (t[y][0][0] + t[y][0][1] + t[y][1][0] + t[y][1][1]);
    let pos_rate = |s: usize| (t[0][s][1] + t[1][s][1]) / (t[0][s][0] + t[0][s][1] + t[1][s][0] + t[1][s][1]);
    let cond = |y: usize, s: usize| t[y][s][1] / (t[y][s][0] + t[y][s][1]);
    let fpr_gap = (cond(0, 0) - cond(0, 1)).abs();
    let tpr_gap = (cond(1, 0) - cond(1, 1)).abs();
    Brute {
        acc: 100.0 * acc,
        bacc: 100.0 * 0.5 * (recall(0) + recall(1)),
        dp: 100.0 * (pos_rate(0) - pos_rate(1)).abs(),
        eo: 100.0 * 0.5 * (fpr_gap + tpr_gap),
        eopp: 100.0 * tpr_gap,
    }
}

/// Random binary record set with every `(y, s)` cell populated.
pub fn random_records(r: &mut Rng) -> Vec<EvalRecord> {
    let n = r.random_range(8..300);
    let bias: f64 = r.random_range(0.1..0.9);
    (0..n)
        .map(|i| {
            let (y, s) = if i < 4 {
                (i / 2, i % 2)
            } else {
                (r.random_range(0..2), r.random_range(0..2))
            };
            let y_pred = if r.random::<f64>() < bias { y } else { 1 - y };
            let p1 = if y_pred == 1 { 0.75 } else { 0.25 };
            EvalRecord {
                y_true: y,
                y_pred,
                s,
                probs: vec![1.0 - p1, p1],
            }
        })
        .collect()
}

pub fn metric_oracle(sets: usize, seed: u64) -> Check {
    let mut r = rng::stream(seed, Stream::DataGen, 99);
    let mut worst: f64 = 0.0;
    for i in 0..sets {
        let records = random_records(&mut r);
        let m = prediction_metrics(&records).map_err(|e| format!("set {i}: {e}"))?;
        let b = brute_force(&records);
        for (name, got, want) in [
            ("acc", m.acc, b.acc),
            ("bacc", m.bacc, b.bacc),
            ("dp", m.dp, b.dp),
            ("eo", m.eo, b.eo),
            ("eopp", m.eopp, b.eopp),
        ] {
            let err = (got - want).abs();
            worst = worst.max(err);
            if err > 1e-9 {
                return Err(format!("set {i}: {name} = {got} but contingency table gives {want}"));
            }
        }
    }
    Ok(format!("{sets} record sets, max abs deviation {worst:e}"))
}

/// Convenience for building a FairNVT model outside the trainer.
pub fn fresh_model(seed: u64) -> Model {
    build_model(&small_config(ClassifierInput::FairNvt), &small_splits(seed)).unwrap()
}
