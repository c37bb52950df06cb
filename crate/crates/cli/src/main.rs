//! `fairnvt` command-line experiments.
//!
//! Exit codes: 0 success, 2 usage/config/data error, 3 numerical abort,
//! 4 property violation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairnvt::config::TrainConfig;
use fairnvt::data::{dump_embeddings, generate, read_splits, write_splits, Splits, SynthConfig};
use fairnvt::infer::{predict_single, prediction_csv, run_eval, EvalConfig};
use fairnvt::lemma::verify_lemma;
use fairnvt::metrics::{attacker_accuracy, AttackerConfig};
use fairnvt::model::{load_checkpoint, save_checkpoint, Model};
use fairnvt::rng::child_seed;
use fairnvt::train::{build_model, run_ablation_grid, train, Grid, TrainError};

#[derive(Parser)]
#[command(
    name = "fairnvt",
    version,
    about = "Debiased embeddings via adapters, noise injection and fairness-aware training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased dataset as train/val/test CSVs.
    GenData(GenData),
    /// Train adapters and heads on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train a post-hoc attacker on exported fused embeddings.
    Attack(AttackArgs),
    /// Train and evaluate every cell of a config grid.
    Ablate(AblateArgs),
    /// Exhaustively check the independence and TV-bound properties on finite supports.
    VerifyLemma(LemmaArgs),
}

/// Seed flag shared by all commands; `FAIRNVT_SEED` is the fallback.
#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "FAIRNVT_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    task_sep: f64,
    #[arg(long, default_value_t = 0.5)]
    base_y: f64,
    #[arg(long, default_value_t = 0.5)]
    base_s: f64,
    /// Correlation of the latent Gaussians behind y and s.
    #[arg(long, default_value_t = 0.15)]
    coupling: f64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint of the best-validation epoch.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overrides the config file's `seed`.
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    draws: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-sample predictions and mean probabilities.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    hidden_layers: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    hidden_layers: usize,
    /// Directory for the exported train/test fused embeddings.
    #[arg(long)]
    export: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `;`-separated axes `key=v1,v2`; `toggles` expands to the 8 switch cells.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the config file's `seed` for every cell.
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct LemmaArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Per-trial `(tv, max_dp)` CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

enum Failure {
    Usage(String),
    Numerical(String),
    Violation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Violation(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Violation(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn from_train(e: TrainError) -> Failure {
    match e {
        TrainError::NumericalAbort { .. } | TrainError::Breakdown { .. } => Failure::Numerical(e.to_string()),
        other => usage(other),
    }
}

type Outcome = Result<(), Failure>;

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<Splits, Failure> {
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    read_splits(dir).map_err(usage)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    let bytes = fs::read(path).map_err(|e| usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    load_checkpoint(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::parse(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn gen_data(a: GenData) -> Outcome {
    let cfg = SynthConfig {
        n: a.n,
        dim: a.dim,
        rho: a.rho,
        task_sep: a.task_sep,
        base_rate_y: a.base_y,
        base_rate_s: a.base_s,
        coupling: a.coupling,
        seed: a.seed.seed.unwrap_or(0),
    };
    let splits = generate(&cfg).map_err(usage)?;
    fs::create_dir_all(&a.out).map_err(|e| usage(format!("cannot create {}: {e}", a.out.display())))?;
    write_splits(&splits, &a.out).map_err(usage)?;
    for ds in [&splits.train, &splits.val, &splits.test] {
        println!("{}: {} rows x {} features", ds.split.file_name(), ds.len(), ds.dim());
    }
    Ok(())
}

fn eval_config(draws: usize, seed: u64, hidden_layers: usize) -> EvalConfig {
    EvalConfig {
        draws,
        seed,
        attacker: AttackerConfig {
            hidden_layers,
            seed,
            ..Default::default()
        },
    }
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let cfg = load_config(&a.config, a.seed.seed)?;
    let splits = load_data(&a.data)?;
    let model = build_model(&cfg, &splits).map_err(from_train)?;
    let outcome = match train(model, &splits.train, &splits.val, &cfg) {
        Ok(o) => o,
        Err(TrainError::NumericalAbort {
            epoch,
            batch,
            reason,
            last_good,
        }) => {
            write_file(&a.out, &save_checkpoint(&last_good))?;
            return Err(Failure::Numerical(format!(
                "numerical abort at epoch {epoch}, batch {batch}: {reason}; last good parameters written to {}",
                a.out.display()
            )));
        }
        Err(e) => return Err(from_train(e)),
    };
    write_file(&a.out, &save_checkpoint(&outcome.best))?;
    if let Some(log) = &a.log {
        write_file(log, outcome.log.to_csv().as_bytes())?;
    }
    let eval = eval_config(cfg.draws, cfg.seed, cfg.attacker_hidden_layers);
    let report = run_eval(&outcome.best, &splits.val, &splits.train, &eval)
        .map_err(usage)?
        .report;
    println!("best_epoch={}", outcome.best_epoch);
    print!("{}", report.to_kv());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let splits = load_data(&a.data)?;
    let cfg = eval_config(a.draws, a.seed.seed.unwrap_or(0), a.hidden_layers);
    let out = run_eval(&model, &splits.test, &splits.train, &cfg).map_err(usage)?;
    let kv = out.report.to_kv();
    if let Some(path) = &a.report {
        write_file(path, kv.as_bytes())?;
    }
    if let Some(path) = &a.predictions {
        write_file(path, prediction_csv(&out.prediction).as_bytes())?;
    }
    print!("{kv}");
    Ok(())
}

fn attack_cmd(a: AttackArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let splits = load_data(&a.data)?;
    let seed = a.seed.seed.unwrap_or(0);
    // Same exports as `eval`, so both commands agree for equal seeds.
    let train_export = predict_single(&model, &splits.train, child_seed(seed, 1)).map_err(usage)?;
    let test_export = predict_single(&model, &splits.test, seed).map_err(usage)?;
    if let Some(dir) = &a.export {
        fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
        for (ds, fused) in [(&splits.train, &train_export.fused), (&splits.test, &test_export.fused)] {
            let emb = ds.with_features(fused.clone()).map_err(usage)?;
            dump_embeddings(&emb, &dir.join(ds.split.file_name())).map_err(usage)?;
        }
    }
    let cfg = AttackerConfig {
        hidden_layers: a.hidden_layers,
        seed,
        ..Default::default()
    };
    let out = attacker_accuracy(
        &train_export.fused,
        &splits.train.s,
        &test_export.fused,
        &splits.test.s,
        &cfg,
    )
    .map_err(usage)?;
    println!("att_acc={:.4}", out.att_acc);
    println!("balanced_att_acc={:.4}", out.balanced_att_acc);
    println!("epochs={}", out.epochs);
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Outcome {
    let cfg = load_config(&a.config, a.seed.seed)?;
    let grid: Grid = a.grid.parse().map_err(usage)?;
    let splits = load_data(&a.data)?;
    let file = File::create(&a.out).map_err(|e| usage(format!("cannot write {}: {e}", a.out.display())))?;
    let mut out = BufWriter::new(file);
    let header = grid.csv_header();
    let mut io_error = None;
    let mut emit = |line: &str| {
        if io_error.is_none() {
            if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
                io_error = Some(e);
            }
        }
    };
    emit(&header);
    println!("{header}");
    let result = run_ablation_grid(&cfg, &grid, &splits, a.jobs.max(1), |row| {
        let line = row.csv_line();
        println!("{line}");
        emit(&line);
    });
    if let Some(e) = io_error {
        return Err(usage(format!("cannot write {}: {e}", a.out.display())));
    }
    result.map(|_| ()).map_err(from_train)
}

fn lemma_cmd(a: LemmaArgs) -> Outcome {
    let report = verify_lemma(a.trials, a.seed.seed.unwrap_or(0));
    if let Some(path) = &a.report {
        write_file(path, report.csv().as_bytes())?;
    }
    print!("{}", report.summary());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Violation(format!("{} violations", report.violations.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::VerifyLemma(a) => lemma_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
