use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attn_bilstm::cli::{RunConfig, DATA_ROOT_ENV};
use attn_bilstm::dataset::{read_archive, Label};
use attn_bilstm::model::{count_parameters, ModelConfig};

const BIN: &str = env!("CARGO_BIN_EXE_attn-bilstm");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).env_remove(DATA_ROOT_ENV).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "n_fe1 = 3\nn_fe3 = 3\nlearning_rate = 0.005\nbatch_size = 10\nepochs = 1\n";

/// Synthetic dataset of `segments` windows segmented into `seg/`, plus a
/// small model config at `small.cfg`.
fn prepared(segments: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let seg = segments.to_string();
    let o = run(dir.path(), &["synth", "--segments", &seg, "--rate-hz", "8", "--out-dir", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dir.path(), &["segment", "data", "--out-dir", "seg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn path(dir: &tempfile::TempDir, rel: &str) -> PathBuf {
    dir.path().join(rel)
}

#[test]
fn segment_writes_archives_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["synth", "--segments", "30", "--rate-hz", "8", "--out-dir", "data"]).status.success());
    std::fs::write(path(&dir, "data/syn02_09.edf"), b"not an edf").unwrap();
    let o = run(dir.path(), &["segment", "data", "--seed", "4", "--out-dir", "seg"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let full = read_archive(&path(&dir, "seg/full.segv")).unwrap();
    assert_eq!(full.len(), 30);
    assert_eq!(full.iter().filter(|s| s.label == Label::Seizure).count(), 15);
    assert_eq!(full[0].data.shape(), &[184, 17]);
    let balanced = read_archive(&path(&dir, "seg/balanced.segv")).unwrap();
    assert_eq!(balanced.len(), 30);

    let manifest = std::fs::read_to_string(path(&dir, "seg/segment_manifest.txt")).unwrap();
    assert!(manifest.contains("# command = segment"));
    assert!(manifest.contains("seizure_segments = 15"));
    assert!(manifest.contains("skipped syn02_09.edf"));
    assert!(manifest.contains("\nseed = 4\n"));
}

#[test]
fn segment_reads_data_root_from_env() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["synth", "--segments", "12", "--rate-hz", "8", "--out-dir", "data"]).status.success());
    let o = Command::new(BIN)
        .current_dir(dir.path())
        .env(DATA_ROOT_ENV, dir.path().join("data"))
        .args(["segment", "--out-dir", "seg"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_archive(&path(&dir, "seg/full.segv")).unwrap().len(), 12);
}

#[test]
fn exit_codes() {
    let dir = prepared(20);
    let d = dir.path();
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(run(d, &["segment", "empty", "--out-dir", "x"]).status.code(), Some(1));
    assert_eq!(run(d, &["segment"]).status.code(), Some(2));

    let o = run(d, &["train", "nowhere.segv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.segv"));

    std::fs::write(d.join("bad.cfg"), "epochs = 3\nlearnign_rate = 0.1\n").unwrap();
    let o = run(d, &["train", "seg/balanced.segv", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnign_rate"));

    std::fs::write(d.join("bad.cfg"), "batch_size = thirty\n").unwrap();
    let o = run(d, &["train", "seg/balanced.segv", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"));

    assert_eq!(run(d, &["eval", "seg/balanced.segv", "--protocol", "loo"]).status.code(), Some(2));
    assert_eq!(run(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn default_config_echoes_training_settings() {
    let dir = prepared(20);
    let o = run(dir.path(), &["train", "seg/balanced.segv", "--dry-run", "--out-dir", "dry"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("learning_rate 0.0013 batch_size 30 epochs 35 parameters 197078"), "{text}");
    let manifest = std::fs::read_to_string(path(&dir, "dry/train_manifest.txt")).unwrap();
    assert!(manifest.contains("# parameter_count = 197078"));
}

#[test]
fn ablation_flags_reduce_to_plain_lstm() {
    let dir = prepared(20);
    let o = run(
        dir.path(),
        &["train", "seg/balanced.segv", "--dry-run", "--ablate-attention", "--ablate-backward", "--out-dir", "dry"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let plain = ModelConfig { attention_enabled: false, bidirectional_enabled: false, ..ModelConfig::paper() };
    assert!(stdout(&o).contains(&format!("parameters {}", count_parameters(&plain))));
    let manifest = std::fs::read_to_string(path(&dir, "dry/train_manifest.txt")).unwrap();
    assert!(manifest.contains("\nattention = false\n") && manifest.contains("\nbidirectional = false\n"));
}

#[test]
fn train_is_reproducible_from_its_manifest() {
    let dir = prepared(20);
    let d = dir.path();
    let a = run(d, &["train", "seg/balanced.segv", "--config", "small.cfg", "--seed", "3", "--out-dir", "a"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(stdout(&a).contains("final validation"));
    let history = std::fs::read_to_string(path(&dir, "a/history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,val_sens,val_spec,val_prec,val_f1,val_acc");

    let b = run(d, &["train", "seg/balanced.segv", "--config", "a/train_manifest.txt", "--out-dir", "b"]);
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let ca = std::fs::read(path(&dir, "a/model.ckpt")).unwrap();
    let cb = std::fs::read(path(&dir, "b/model.ckpt")).unwrap();
    assert_eq!(ca, cb);

    let c = run(d, &["train", "seg/balanced.segv", "--config", "small.cfg", "--seed", "4", "--out-dir", "c"]);
    assert!(c.status.success());
    assert_ne!(ca, std::fs::read(path(&dir, "c/model.ckpt")).unwrap());
}

#[test]
fn manifest_config_lines_round_trip() {
    let mut c = RunConfig::default();
    c.apply_text(SMALL).unwrap();
    c.set("clip_norm", "2.5").unwrap();
    c.set("merge", "sum").unwrap();
    let mut back = RunConfig::default();
    back.apply_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn eval_emits_protocol_tables() {
    let dir = prepared(30);
    let d = dir.path();
    let o = run(d, &["eval", "seg/balanced.segv", "--config", "small.cfg", "--protocol", "cv", "--out-dir", "cv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rounds = std::fs::read_to_string(path(&dir, "cv/rounds.csv")).unwrap();
    let lines: Vec<&str> = rounds.lines().collect();
    assert_eq!(lines[0], "round,sens,spec,f1,prec,acc");
    assert_eq!(lines.len(), 11);
    assert!(lines[10].starts_with("10,"));
    let agg = std::fs::read_to_string(path(&dir, "cv/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().next().unwrap(), "stat,sens,spec,f1,prec,acc");
    assert_eq!(agg.lines().count(), 4);
    assert!(std::fs::read_to_string(path(&dir, "cv/eval_manifest.txt")).unwrap().contains("# protocol = cv"));

    let o = run(d, &["eval", "seg/balanced.segv", "--config", "small.cfg", "--protocol", "cross-patient", "--out-dir", "cp"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rounds = std::fs::read_to_string(path(&dir, "cp/rounds.csv")).unwrap();
    let labels: Vec<&str> = rounds.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, vec!["Syn01", "Syn02", "Syn03"]);
}

#[test]
fn explain_exports_attention_rows() {
    let dir = prepared(20);
    let d = dir.path();
    assert!(run(d, &["train", "seg/balanced.segv", "--config", "small.cfg", "--out-dir", "m"]).status.success());
    let o = run(d, &["explain", "m/model.ckpt", "seg/balanced.segv", "--out-dir", "ex"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(path(&dir, "ex/attention.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("segment_id,"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 20);
    for r in &rows {
        assert_eq!(r.len(), 17);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let o = run(d, &["train", "seg/balanced.segv", "--config", "small.cfg", "--ablate-attention", "--out-dir", "abl"]);
    assert!(o.status.success());
    let o = run(d, &["explain", "abl/model.ckpt", "seg/balanced.segv", "--out-dir", "ex2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("without the attention layer"));
}

#[test]
fn gradcheck_reports_max_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    let err: f64 = last.trim_start_matches("max relative error ").parse().unwrap();
    assert!(err <= 1e-4);
}
