//! Acceptance criteria, one status line each. Runs as a plain binary so the
//! lines print whether or not everything passes.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use attn_bilstm::autodiff::Tape;
use attn_bilstm::cli::DATA_ROOT_ENV;
use attn_bilstm::dataset::{segment_directory_canonical, Label, Segment};
use attn_bilstm::edf::{parse_edf, write_edf};
use attn_bilstm::eval::{plan_cross_patient, plan_cross_validation, run_protocol, subject_of, SplitPlan};
use attn_bilstm::gradcheck::check_model_gradients;
use attn_bilstm::model::*;
use attn_bilstm::synthetic::{scaled_model_config, scaled_train_config, write_synthetic_dataset, SyntheticConfig};
use attn_bilstm::tensor::Tensor;
use attn_bilstm::train::rmsprop_update;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

const BIN: &str = env!("CARGO_BIN_EXE_attn-bilstm");

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<Status, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_parameter_count() -> Check {
    let n = count_parameters(&ModelConfig::paper());
    ensure(n == 197_078, format!("count_parameters = {n}, expected 197078"))?;
    Ok(Status::Pass(format!("{n} parameters")))
}

fn c2_gradients() -> Check {
    let mut worst = 0.0f64;
    for config in variants() {
        for seed in 0..3 {
            for g in check_model_gradients(&config, 2, seed).map_err(|e| e.to_string())? {
                worst = worst.max(g.max_relative_error);
            }
        }
    }
    ensure(worst <= 1e-4, format!("max relative error {worst:.3e} > 1e-4"))?;
    Ok(Status::Pass(format!("max relative error {worst:.3e} over 6 variants x 3 seeds")))
}

fn c3_forward_oracle() -> Check {
    let mut worst = 0.0f64;
    for (i, config) in variants().into_iter().enumerate() {
        let p = random_params(&config, 200 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let x = random_tensor(&[2, config.n_sp, config.n_ch], &mut rng, 2.0);
        let (logits, probs, weights) = run(&config, &p, &x);
        let want = oracle_forward(&config, &p, &x);
        let diff = |t: &Tensor, rows: &[Vec<f64>]| {
            t.data().iter().zip(rows.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        worst = worst.max(diff(&logits, &want.logits)).max(diff(&probs, &want.probs));
        if let Some(w) = weights {
            worst = worst.max(diff(&w, &want.weights));
        }
    }
    ensure(worst <= 1e-10, format!("max abs difference {worst:.3e} > 1e-10"))?;
    Ok(Status::Pass(format!("max abs difference {worst:.3e}")))
}

fn c4_layer_properties() -> Check {
    let config = ModelConfig::tiny();
    let p = random_params(&config, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&[4, 4, 3], &mut rng, 2.0);
    let (_, probs, weights) = run(&config, &p, &x);

    for row in probs.data().chunks(2) {
        ensure((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "class probabilities do not sum to 1")?;
    }

    let weights = weights.ok_or("no attention weights")?;
    for row in weights.data().chunks(3) {
        ensure((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "attention weights do not sum to 1")?;
    }
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let xv = tape.constant(x.clone());
    let att = attention_forward(&mut tape, xv, vars.attention.as_ref().unwrap(), config.attention_nonlinearity)
        .map_err(|e| e.to_string())?;
    let (w, y) = (tape.value(att.weights), tape.value(att.y));
    for s in 0..4 {
        for t in 0..4 {
            for c in 0..3 {
                ensure(y.at(&[s, t, c]) == x.at(&[s, t, c]) * w.at(&[s, c]), "attention weight varies over time")?;
            }
        }
    }

    let d = random_direction(3, 4, 9);
    let seq = random_tensor(&[2, 5, 3], &mut rng, 1.0);
    let both = lstm_run(&seq, &random_direction(3, 4, 10), Some(&d), Merge::Concat);
    let expected = reverse_time(&lstm_run(&reverse_time(&seq), &d, None, Merge::Concat));
    for s in 0..2 {
        for t in 0..5 {
            for j in 0..4 {
                ensure(both.at(&[s, t, 4 + j]) == expected.at(&[s, t, j]), "BiLSTM reversal identity")?;
            }
        }
    }

    let seqp = random_tensor(&[1, 6, 2], &mut rng, 1.0);
    let perm = [4usize, 2, 0, 5, 1, 3];
    let permuted: Vec<f64> = perm.iter().flat_map(|&t| seqp.data()[t * 2..t * 2 + 2].to_vec()).collect();
    let mut tape = Tape::new();
    let a = tape.constant(seqp.clone());
    let b = tape.constant(Tensor::new(vec![1, 6, 2], permuted).unwrap());
    let pa = average_pool(&mut tape, a).map_err(|e| e.to_string())?;
    let pb = average_pool(&mut tape, b).map_err(|e| e.to_string())?;
    ensure(tape.value(pa).max_abs_diff(tape.value(pb)) < 1e-15, "pooling depends on step order")?;

    let (batch_logits, _, _) = run(&config, &p, &x);
    for s in 0..4 {
        let one = Tensor::new(vec![1, 4, 3], x.data()[s * 12..(s + 1) * 12].to_vec()).unwrap();
        let (l, _, _) = run(&config, &p, &one);
        ensure(l.data() == &batch_logits.data()[s * 2..s * 2 + 2], "batch evaluation mixes samples")?;
    }

    let mut w = Tensor::vector(&[1.0]);
    let mut acc = Tensor::vector(&[0.0]);
    rmsprop_update(&mut w, &Tensor::vector(&[1.0]), &mut acc, 0.1, 0.9, 1e-8).map_err(|e| e.to_string())?;
    let v = w.data()[0];
    ensure((v - 0.683772).abs() <= 1e-6, format!("rmsprop scalar example gave {v}"))?;
    Ok(Status::Pass(format!("6 properties hold, rmsprop scalar {v:.6}")))
}

fn synthetic_corpus_via_edf(dir: &Path, cfg: &SyntheticConfig) -> Result<Vec<Segment>, String> {
    write_synthetic_dataset(dir, cfg).map_err(|e| e.to_string())?;
    let mut corpus = Vec::new();
    segment_directory_canonical(dir, |s| {
        corpus.push(s);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(corpus)
}

fn c5_synthetic_end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SyntheticConfig::default();
    let corpus = synthetic_corpus_via_edf(dir.path(), &cfg)?;
    let seizures = corpus.iter().filter(|s| s.label == Label::Seizure).count();
    ensure(corpus.len() == 200 && seizures == 100, format!("corpus has {} segments, {seizures} seizure", corpus.len()))?;

    let plan = plan_cross_validation(corpus.len(), 10, cfg.seed).map_err(|e| e.to_string())?;
    let report = run_protocol(&plan, &corpus, &scaled_model_config(&cfg), &scaled_train_config(cfg.seed))
        .map_err(|e| e.to_string())?;
    let [sens, spec, ..] = report.aggregate.columns;
    let (sens, spec) = (sens.mean.unwrap_or(0.0), spec.mean.unwrap_or(0.0));
    let detail = format!("mean test sens {sens:.4} spec {spec:.4} over {} rounds", report.rounds.len());
    if sens >= 0.95 && spec >= 0.95 {
        Ok(Status::Pass(detail))
    } else {
        Ok(Status::Fail(detail + ", need >= 0.95 each"))
    }
}

fn disjoint(plan: &SplitPlan) -> bool {
    plan.rounds.iter().all(|r| {
        let all: HashSet<usize> = r.train.iter().chain(&r.validation).chain(&r.test).copied().collect();
        all.len() == r.train.len() + r.validation.len() + r.test.len()
    })
}

fn c6_protocol_structure() -> Check {
    let cv = plan_cross_validation(1330, 10, 0).map_err(|e| e.to_string())?;
    ensure(cv.rounds.len() == 10, "cross-validation round count")?;
    for r in &cv.rounds {
        let sizes = (r.train.len(), r.validation.len(), r.test.len());
        ensure(sizes == (931, 199, 200), format!("round {} split {sizes:?}", r.label))?;
    }
    ensure(disjoint(&cv), "cross-validation splits overlap")?;

    let mut cases = Vec::new();
    let mut labels = Vec::new();
    for c in 1..=24 {
        for k in 0..8 {
            cases.push(format!("chb{c:02}"));
            labels.push(if k < 3 { Label::Seizure } else { Label::NonSeizure });
        }
    }
    let refs: Vec<&str> = cases.iter().map(String::as_str).collect();
    let cp = plan_cross_patient(&refs, &labels, 0).map_err(|e| e.to_string())?;
    ensure(cp.rounds.len() == 23, format!("{} cross-patient rounds, expected 23", cp.rounds.len()))?;
    ensure(disjoint(&cp), "cross-patient splits overlap")?;
    for r in &cp.rounds {
        let held: HashSet<String> = r.test.iter().map(|&i| subject_of(&cases[i])).collect();
        ensure(held.len() == 1, format!("round {} tests {} subjects", r.label, held.len()))?;
        let leak = r.train.iter().chain(&r.validation).any(|&i| held.contains(&subject_of(&cases[i])));
        ensure(!leak, format!("round {} leaks its test subject", r.label))?;
    }
    let merged = cp.rounds.iter().find(|r| r.label == "Chb01,21").ok_or("no Chb01,21 round")?;
    let held: HashSet<&str> = merged.test.iter().map(|&i| cases[i].as_str()).collect();
    ensure(held.contains("chb01") && held.contains("chb21"), "chb01 and chb21 not co-assigned")?;
    Ok(Status::Pass("cv 10 x 931/199/200; cross-patient 23 rounds, no leakage, Chb01,21 merged".into()))
}

fn c7_chb_mit() -> Check {
    let Some(root) = std::env::var_os(DATA_ROOT_ENV) else {
        return Ok(Status::Skip(format!("{DATA_ROOT_ENV} not set; CHB-MIT not available")));
    };
    let mut seizures = 0usize;
    let report = segment_directory_canonical(Path::new(&root), |s| {
        if s.label == Label::Seizure {
            seizures += 1;
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let skipped: Vec<&str> = report.skipped.iter().map(|s| s.file.as_str()).collect();
    let detail = format!("{seizures} seizure segments, skipped {skipped:?}");
    if seizures == 665 {
        Ok(Status::Pass(detail))
    } else {
        Ok(Status::Fail(detail + ", expected 665"))
    }
}

fn c8_edf_round_trip() -> Check {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/edf");
    let mut files = 0;
    for entry in std::fs::read_dir(&fixtures).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_none_or(|e| e != "edf") {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let (header, record) = parse_edf(&bytes).map_err(|e| e.to_string())?;
        let again = write_edf(&header, &record).map_err(|e| e.to_string())?;
        ensure(again == bytes, format!("{} does not re-serialize bit-exactly", path.display()))?;
        for s in &header.signals {
            ensure(s.to_physical(s.digital_max as i16) == s.physical_max, "digital_max does not map to physical_max")?;
            ensure(s.to_physical(s.digital_min as i16) == s.physical_min, "digital_min does not map to physical_min")?;
        }
        files += 1;
    }
    ensure(files > 0, "no EDF fixtures found")?;
    Ok(Status::Pass(format!("{files} fixture files round-trip bit-exactly, endpoints exact")))
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn c9_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let train = scaled_train_config(0);
    let model = scaled_model_config(&SyntheticConfig::default());
    let cfg = format!(
        "n_fe1 = {}\nn_fe3 = {}\nlearning_rate = {}\nbatch_size = {}\nepochs = {}\n",
        model.n_fe1, model.n_fe3, train.learning_rate, train.batch_size, train.epochs
    );
    std::fs::write(d.join("scaled.cfg"), cfg).map_err(|e| e.to_string())?;
    cli(d, &["synth", "--out-dir", "data"])?;
    cli(d, &["segment", "data", "--out-dir", "seg"])?;
    cli(d, &["train", "seg/balanced.segv", "--config", "scaled.cfg", "--out-dir", "a"])?;
    cli(d, &["train", "seg/balanced.segv", "--config", "a/train_manifest.txt", "--out-dir", "b"])?;
    let a = std::fs::read(d.join("a/model.ckpt")).map_err(|e| e.to_string())?;
    let b = std::fs::read(d.join("b/model.ckpt")).map_err(|e| e.to_string())?;
    ensure(a == b, "checkpoints differ")?;
    Ok(Status::Pass(format!("two {}-byte checkpoints identical", a.len())))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("parameter count", c1_parameter_count),
        ("gradient correctness", c2_gradients),
        ("forward oracle", c3_forward_oracle),
        ("layer properties", c4_layer_properties),
        ("synthetic end-to-end", c5_synthetic_end_to_end),
        ("protocol structure", c6_protocol_structure),
        ("CHB-MIT segmentation", c7_chb_mit),
        ("EDF round trip", c8_edf_round_trip),
        ("determinism", c9_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let status = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(s)) => s,
            Ok(Err(msg)) => Status::Fail(msg),
            Err(_) => Status::Fail("panicked".into()),
        };
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match status {
            Status::Pass(d) => ("PASS", d),
            Status::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Status::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {name}: {tag} ({detail}) [{secs:.1}s]", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
