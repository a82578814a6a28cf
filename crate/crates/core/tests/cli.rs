// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[backbone]
vocab_size = 10
d = 8
n_layers = 2
n_heads = 2
max_seq_len = 5

[train]
lr = 0.01
steps = 6
batch_size = 4

[adapter]
k = 2
rank = 2
positions = "all"

[data]
n_train = 16
n_eval = 8

[[tasks]]
id = 1
kind = "copy"
seq_len = 4
vocab = 8

[[tasks]]
id = 2
kind = "reverse"
seq_len = 4
vocab = 8
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csreft"))
        .args(args)
        .env("CSREFT_LOG", "quiet")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_passes_and_is_repeatable() {
    let a = run(&["gradcheck", "--d", "8", "--r", "2", "--k", "2"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    for group in ["edit.R", "edit.W", "edit.b", "router.W1", "router.b1", "router.W2", "router.b2"] {
        assert!(text.contains(group), "{text}");
    }
    let b = run(&["gradcheck", "--d", "8", "--r", "2", "--k", "2"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn gradcheck_rejects_rank_above_width() {
    let o = run(&["gradcheck", "--d", "4", "--r", "5", "--k", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["gradcheck", "--d", "64", "--r", "2", "--k", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_and_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    let a = run(&["train", "--config", &cfg, "--out", out1.to_str().unwrap()]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = run(&["train", "--config", &cfg, "--out", out2.to_str().unwrap()]);
    assert_eq!(b.status.code(), Some(0));
    assert!(out1.join("checkpoint.csrf").exists());
    let log1 = fs::read(out1.join("train_log.tsv")).unwrap();
    assert_eq!(log1, fs::read(out2.join("train_log.tsv")).unwrap());
    assert_eq!(String::from_utf8(log1).unwrap().lines().count(), 6);
    assert_eq!(
        fs::read(out1.join("checkpoint.csrf")).unwrap(),
        fs::read(out2.join("checkpoint.csrf")).unwrap()
    );

    let c = run(&["train", "--config", &cfg, "--out", out2.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(
        fs::read(out1.join("train_log.tsv")).unwrap(),
        fs::read(out2.join("train_log.tsv")).unwrap()
    );
}

#[test]
fn negative_learning_rate_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\nlr = -1.0\n");
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[adapter]\nrnak = 3\n");
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("adapter"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_1() {
    let o = run(&["train", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_2_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("lr = 0.01", "lr = 1.7e308");
    let cfg = write_config(dir.path(), "boom.toml", &text);
    let out = dir.path().join("o");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn interfere_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let o = run(&["interfere", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["interference_report.txt", "interference_matrix.csv"] {
        assert_eq!(fs::read(out1.join(file)).unwrap(), fs::read(out2.join(file)).unwrap());
    }
}

#[test]
fn interfere_without_tasks_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "none.toml", "tasks = []\n");
    let o = run(&["interfere", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tasks"));
}

#[test]
fn countparams_prints_exact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[backbone]\nd = 4\nn_heads = 2\n\n[adapter]\nk = 2\nrank = 1\nlayers = [0]\n";
    let cfg = write_config(dir.path(), "c.toml", text);
    let o = run(&["countparams", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = String::from_utf8(o.stdout).unwrap();
    // Two rank-1 edits at d=4: 2·(2·4 + 1) = 18; router 4·2 + 2 + 2·2 + 2 = 16.
    assert!(s.contains("edits = 18 "), "{s}");
    assert!(s.contains("router = 16\n"), "{s}");
    assert!(s.contains("total = 34\n"), "{s}");
}

#[test]
fn bad_gate_flag_is_rejected() {
    let o = run(&["--gate", "medium", "gradcheck"]);
    assert_eq!(o.status.code(), Some(1));
}
