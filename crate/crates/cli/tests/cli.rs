use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_MODEL: &str = "\
model.hidden_dim=8
model.task_reduction=2
model.sens_reduction=4
batch_size=64
epochs=2
";

fn fairnvt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairnvt"))
        .current_dir(dir)
        .env_remove("FAIRNVT_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fairnvt(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Small dataset plus a config tuned for it.
fn workspace(extra_config: &str) -> TempDir {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["gen-data", "--out", "data", "--n", "200", "--dim", "8"]);
    fs::write(tmp.path().join("cfg.txt"), format!("{SMALL_MODEL}{extra_config}")).unwrap();
    tmp
}

fn trained(extra_config: &str) -> TempDir {
    let tmp = workspace(extra_config);
    ok(
        tmp.path(),
        &[
            "train", "--config", "cfg.txt", "--data", "data", "--out", "m.ckpt", "--log", "log.csv",
        ],
    );
    tmp
}

#[test]
fn gen_data_writes_three_deterministic_files() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    ok(p, &["gen-data", "--out", "a"]);
    ok(p, &["gen-data", "--out", "b"]);
    for f in ["train.csv", "val.csv", "test.csv"] {
        let a = fs::read(p.join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(p.join("b").join(f)).unwrap());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5001);
    }
}

#[test]
fn gen_data_rejects_out_of_range_rho() {
    let tmp = TempDir::new().unwrap();
    let out = fairnvt(tmp.path(), &["gen-data", "--out", "d", "--rho", "1.5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rho"));
}

#[test]
fn seed_env_is_a_fallback() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    ok(p, &["gen-data", "--out", "flag", "--n", "20", "--seed", "5"]);
    let env = Command::new(env!("CARGO_BIN_EXE_fairnvt"))
        .current_dir(p)
        .env("FAIRNVT_SEED", "5")
        .args(["gen-data", "--out", "env", "--n", "20"])
        .output()
        .unwrap();
    assert!(env.status.success());
    ok(p, &["gen-data", "--out", "zero", "--n", "20"]);
    let read = |d: &str| fs::read(p.join(d).join("train.csv")).unwrap();
    assert_eq!(read("flag"), read("env"));
    assert_ne!(read("flag"), read("zero"));
}

#[test]
fn train_is_reproducible_and_logs() {
    let tmp = trained("");
    let p = tmp.path();
    let first = fs::read(p.join("m.ckpt")).unwrap();
    let stdout = ok(
        p,
        &[
            "train", "--config", "cfg.txt", "--data", "data", "--out", "m2.ckpt", "--log", "log2.csv",
        ],
    );
    assert_eq!(first, fs::read(p.join("m2.ckpt")).unwrap());
    assert_eq!(
        fs::read(p.join("log.csv")).unwrap(),
        fs::read(p.join("log2.csv")).unwrap()
    );
    assert!(stdout.contains("att_acc="));
    let log = fs::read_to_string(p.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,split,task_ce,"));
    // 2 epochs x (train, val)
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn toggles_off_matches_zeroed_weights() {
    let off = trained("toggles.fair=off\ntoggles.orth=off\ntoggles.noise=off\n");
    let zero = trained("loss.beta2=0\nloss.beta3=0\nnoise.sigma=0\n");
    let eval = |d: &TempDir| ok(d.path(), &["eval", "--ckpt", "m.ckpt", "--data", "data"]);
    assert_eq!(eval(&off), eval(&zero));
}

#[test]
fn train_error_exit_codes() {
    let tmp = workspace("");
    let p = tmp.path();
    let missing = fairnvt(
        p,
        &["train", "--config", "cfg.txt", "--data", "nope", "--out", "m.ckpt"],
    );
    assert_eq!(code(&missing), 2);
    fs::write(p.join("bad.txt"), "noise.sigma=-1\n").unwrap();
    assert_eq!(
        code(&fairnvt(
            p,
            &["train", "--config", "bad.txt", "--data", "data", "--out", "m.ckpt"]
        )),
        2
    );
    fs::write(p.join("typo.txt"), "epochz=3\n").unwrap();
    let typo = fairnvt(
        p,
        &["train", "--config", "typo.txt", "--data", "data", "--out", "m.ckpt"],
    );
    assert_eq!(code(&typo), 2);
    assert!(String::from_utf8_lossy(&typo.stderr).contains("line 1"));
    fs::write(p.join("nan.txt"), format!("{SMALL_MODEL}learning_rate=1e300\n")).unwrap();
    let nan = fairnvt(
        p,
        &["train", "--config", "nan.txt", "--data", "data", "--out", "nan.ckpt"],
    );
    assert_eq!(code(&nan), 3);
    // the last good parameters are still loadable
    ok(p, &["eval", "--ckpt", "nan.ckpt", "--data", "data"]);
}

#[test]
fn eval_reports_and_is_deterministic() {
    let tmp = trained("");
    let p = tmp.path();
    let a = ok(
        p,
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--data",
            "data",
            "--report",
            "r.txt",
            "--predictions",
            "pred.csv",
        ],
    );
    let b = ok(p, &["eval", "--ckpt", "m.ckpt", "--data", "data"]);
    assert_eq!(a, b);
    assert_eq!(fs::read_to_string(p.join("r.txt")).unwrap(), a);
    let keys: Vec<&str> = a.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["acc", "bacc", "dp", "eopp", "eo", "att_acc", "balanced_att_acc"]);
    let pred = fs::read_to_string(p.join("pred.csv")).unwrap();
    assert!(pred.starts_with("id,y_true,s,y_pred,p_0,p_1\n"));
    assert_eq!(pred.lines().count(), 201);
    ok(p, &["eval", "--ckpt", "m.ckpt", "--data", "data", "--draws", "5"]);
}

#[test]
fn eval_input_errors() {
    let tmp = trained("");
    let p = tmp.path();
    assert_eq!(
        code(&fairnvt(p, &["eval", "--ckpt", "missing.ckpt", "--data", "data"])),
        2
    );
    ok(p, &["gen-data", "--out", "wide", "--n", "50", "--dim", "9"]);
    let wide = fairnvt(p, &["eval", "--ckpt", "m.ckpt", "--data", "wide"]);
    assert_eq!(code(&wide), 2);
    assert!(String::from_utf8_lossy(&wide.stderr).contains("features"));
    fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&fairnvt(p, &["eval", "--ckpt", "junk.ckpt", "--data", "data"])), 2);
}

#[test]
fn attack_agrees_with_eval_and_exports() {
    let tmp = trained("");
    let p = tmp.path();
    let eval = ok(p, &["eval", "--ckpt", "m.ckpt", "--data", "data", "--seed", "3"]);
    let attack = ok(
        p,
        &[
            "attack", "--ckpt", "m.ckpt", "--data", "data", "--seed", "3", "--export", "emb",
        ],
    );
    let line = |text: &str, key: &str| text.lines().find(|l| l.starts_with(key)).unwrap().to_string();
    assert_eq!(line(&eval, "att_acc="), line(&attack, "att_acc="));
    assert_eq!(
        attack,
        ok(p, &["attack", "--ckpt", "m.ckpt", "--data", "data", "--seed", "3"])
    );
    let header = fs::read_to_string(p.join("emb/test.csv")).unwrap();
    // FairNVT exports [e_t, e_s_noised]: twice the hidden width
    assert_eq!(header.lines().next().unwrap().split(',').count(), 3 + 16);
    ok(
        p,
        &["attack", "--ckpt", "m.ckpt", "--data", "data", "--hidden-layers", "3"],
    );
}

#[test]
fn attack_rejects_single_group() {
    let tmp = trained("");
    let p = tmp.path();
    fs::create_dir(p.join("one")).unwrap();
    for f in ["train.csv", "val.csv", "test.csv"] {
        let text = fs::read_to_string(p.join("data").join(f)).unwrap();
        let mut lines = text.lines();
        let mut out = format!("{}\n", lines.next().unwrap());
        for l in lines {
            let mut cells: Vec<&str> = l.split(',').collect();
            cells[2] = "0";
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(p.join("one").join(f), out).unwrap();
    }
    assert_eq!(code(&fairnvt(p, &["attack", "--ckpt", "m.ckpt", "--data", "one"])), 2);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let tmp = workspace("");
    let p = tmp.path();
    let args = [
        "ablate",
        "--config",
        "cfg.txt",
        "--data",
        "data",
        "--grid",
        "toggles.noise=off,on;loss.beta3=0,0.3",
        "--out",
    ];
    let stdout = ok(p, &[&args[..], &["a.csv", "--jobs", "2"]].concat());
    ok(p, &[&args[..], &["b.csv"]].concat());
    let a = fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(p.join("b.csv")).unwrap());
    assert_eq!(a, stdout);
    let mut lines = a.lines();
    assert_eq!(
        lines.next(),
        Some("cell,toggles.noise,loss.beta3,acc,bacc,dp,eopp,eo,att_acc,balanced_att_acc")
    );
    assert_eq!(lines.count(), 4);
    let bad = fairnvt(
        p,
        &[
            "ablate",
            "--config",
            "cfg.txt",
            "--data",
            "data",
            "--grid",
            "noise.sigma",
            "--out",
            "c.csv",
        ],
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn verify_lemma_passes_and_reproduces() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let a = ok(p, &["verify-lemma", "--report", "a.csv"]);
    assert!(a.starts_with("trials=1000 "));
    assert!(a.ends_with("PASS\n"));
    assert_eq!(a, ok(p, &["verify-lemma", "--report", "b.csv"]));
    assert_eq!(fs::read(p.join("a.csv")).unwrap(), fs::read(p.join("b.csv")).unwrap());
    assert!(ok(p, &["verify-lemma", "--trials", "0"]).ends_with("PASS\n"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&fairnvt(tmp.path(), &["bogus"])), 2);
    assert_eq!(code(&fairnvt(tmp.path(), &["train"])), 2);
    assert_eq!(code(&fairnvt(tmp.path(), &["gen-data", "--out", "d", "--n", "x"])), 2);
}
