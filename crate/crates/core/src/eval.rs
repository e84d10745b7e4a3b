//! Metrics, the cross-validation and cross-patient protocols, and
//! attention-weight export. Seizure is the positive class throughout.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Label, Segment};
use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig, ModelParams};
use crate::seeds;
use crate::train::{batch_tensor, evaluate, train, TrainConfig, MICRO_BATCH};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

/// Ratios with a zero denominator are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub fn from_confusion(c: ConfusionMatrix) -> Self {
        let sensitivity = ratio(c.tp, c.tp + c.fn_);
        let precision = ratio(c.tp, c.tp + c.fp);
        let f1 = match (precision, sensitivity) {
            (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
            _ => None,
        };
        Self {
            confusion: c,
            sensitivity,
            specificity: ratio(c.tn, c.tn + c.fp),
            precision,
            f1,
            accuracy: ratio(c.tp + c.tn, c.total()),
        }
    }

    /// Values in CSV column order: sens, spec, f1, prec, acc.
    pub fn columns(&self) -> [Option<f64>; 5] {
        [self.sensitivity, self.specificity, self.f1, self.precision, self.accuracy]
    }
}

pub fn compute_metrics(predictions: &[Label], labels: &[Label]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Metrics(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metrics("no samples".into()));
    }
    let mut c = ConfusionMatrix::default();
    for (p, y) in predictions.iter().zip(labels) {
        match (y, p) {
            (Label::Seizure, Label::Seizure) => c.tp += 1,
            (Label::Seizure, Label::NonSeizure) => c.fn_ += 1,
            (Label::NonSeizure, Label::NonSeizure) => c.tn += 1,
            (Label::NonSeizure, Label::Seizure) => c.fp += 1,
        }
    }
    Ok(MetricsReport::from_confusion(c))
}

/// Mean and sample standard deviation of one metric over rounds, skipping
/// rounds where it is undefined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// `None` with fewer than two defined values.
    pub std: Option<f64>,
    pub excluded: usize,
}

pub fn summarize(values: &[Option<f64>]) -> MetricSummary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let n = defined.len();
    let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
    let std = match (n, mean) {
        (2.., Some(m)) => Some((defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()),
        _ => None,
    };
    MetricSummary { mean, std, excluded: values.len() - n }
}

/// Column order: sens, spec, f1, prec, acc.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub columns: [MetricSummary; 5],
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let columns = std::array::from_fn(|k| {
        let values: Vec<Option<f64>> = reports.iter().map(|r| r.columns()[k]).collect();
        summarize(&values)
    });
    Aggregate { columns }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    CrossValidation,
    CrossPatient,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::CrossValidation => "cv",
            Protocol::CrossPatient => "cross-patient",
        }
    }
}

/// Indices into the corpus for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSplit {
    pub label: String,
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub seed: u64,
    pub rounds: Vec<RoundSplit>,
}

/// `(floor(0.70 n), floor(0.15 n), rest)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

/// Independent 70:15:15 shuffles, one per round.
pub fn plan_cross_validation(n: usize, rounds: usize, seed: u64) -> Result<SplitPlan> {
    if n < 20 {
        return Err(Error::Split(format!("cross-validation needs at least 20 segments, got {n}")));
    }
    if rounds == 0 {
        return Err(Error::Split("at least one round is required".into()));
    }
    let (n_train, n_val, _) = split_sizes(n);
    let rounds = (0..rounds)
        .map(|r| {
            let round_seed = seeds::derive_seed(seed, seeds::ROUNDS, r as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(round_seed));
            let test = idx.split_off(n_train + n_val);
            let validation = idx.split_off(n_train);
            RoundSplit { label: (r + 1).to_string(), seed: round_seed, train: idx, validation, test }
        })
        .collect();
    Ok(SplitPlan { protocol: Protocol::CrossValidation, seed, rounds })
}

/// Case `chb21` is a later recording of the `chb01` subject; both map to
/// `chb01`. Other case ids are their own subject.
pub fn subject_of(case_id: &str) -> String {
    let c = case_id.to_lowercase();
    if c == "chb21" {
        "chb01".into()
    } else {
        c
    }
}

/// Display name of a subject: `Chb01,21` for the merged pair, otherwise the
/// case id with its first letter capitalized.
pub fn subject_label(subject: &str) -> String {
    if subject == "chb01" {
        return "Chb01,21".into();
    }
    let mut chars = subject.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Equal numbers of seizure and non-seizure indices from `pool`: the smaller
/// class in full and a uniform sample of the larger.
fn balance(pool: &[usize], labels: &[Label], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = pool.iter().partition(|&&i| labels[i] == Label::Seizure);
    let k = pos.len().min(neg.len());
    let mut out: Vec<usize> = Vec::with_capacity(2 * k);
    for class in [&pos, &neg] {
        let mut picked: Vec<usize> = sample(rng, class.len(), k).into_iter().map(|j| class[j]).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    out
}

/// Leave-one-subject-out rounds. In each round the held-out subject's
/// segments and the remaining subjects' segments are balanced separately;
/// the remainder is shuffled and split 85:15 into train and validation.
pub fn plan_cross_patient(case_ids: &[&str], labels: &[Label], seed: u64) -> Result<SplitPlan> {
    if case_ids.len() != labels.len() {
        return Err(Error::Split(format!("{} case ids for {} labels", case_ids.len(), labels.len())));
    }
    if let Some(i) = case_ids.iter().position(|c| c.is_empty()) {
        return Err(Error::Split(format!("segment {i} has no subject")));
    }
    let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in case_ids.iter().enumerate() {
        by_subject.entry(subject_of(c)).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::Split(format!("cross-patient evaluation needs at least 2 subjects, got {}", by_subject.len())));
    }

    let mut rounds = Vec::with_capacity(by_subject.len());
    for (r, (subject, held_out)) in by_subject.iter().enumerate() {
        let round_seed = seeds::derive_seed(seed, seeds::ROUNDS, r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
        let test = balance(held_out, labels, &mut rng);
        if test.is_empty() {
            return Err(Error::Split(format!(
                "subject {} lacks segments of one class and cannot form a balanced test set",
                subject_label(subject)
            )));
        }
        let others: Vec<usize> = by_subject
            .iter()
            .filter(|(s, _)| *s != subject)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let mut pool = balance(&others, labels, &mut rng);
        pool.shuffle(&mut rng);
        let n_train = pool.len() * 85 / 100;
        let validation = pool.split_off(n_train);
        if pool.is_empty() || validation.is_empty() {
            return Err(Error::Split(format!(
                "too few balanced segments outside subject {} for an 85:15 split",
                subject_label(subject)
            )));
        }
        rounds.push(RoundSplit { label: subject_label(subject), seed: round_seed, train: pool, validation, test });
    }
    Ok(SplitPlan { protocol: Protocol::CrossPatient, seed, rounds })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundResult {
    pub label: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub rounds: Vec<RoundResult>,
    pub aggregate: Aggregate,
}

/// Trains a freshly initialized model per round (seeded from the round's
/// seed) and evaluates it on the round's test set. Rounds run in parallel.
pub fn run_protocol(
    plan: &SplitPlan,
    corpus: &[Segment],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<ProtocolReport> {
    model.validate()?;
    let n = corpus.len();
    for r in &plan.rounds {
        if let Some(&i) = r.train.iter().chain(&r.validation).chain(&r.test).find(|&&i| i >= n) {
            return Err(Error::Split(format!("round {} refers to segment {i} of {n}", r.label)));
        }
    }
    let pick = |idx: &[usize]| -> Vec<&Segment> { idx.iter().map(|&i| &corpus[i]).collect() };
    let rounds: Vec<RoundResult> = plan
        .rounds
        .par_iter()
        .map(|r| {
            let mut init_rng = seeds::stream(r.seed, seeds::INIT, 0);
            let params = ModelParams::init(model, &mut init_rng);
            let round_config = TrainConfig { seed: r.seed, ..config.clone() };
            let (params, _) = train(params, model, &pick(&r.train), &pick(&r.validation), &round_config)?;
            let metrics = evaluate(&params, model, &pick(&r.test))?;
            Ok(RoundResult { label: r.label.clone(), seed: r.seed, metrics })
        })
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = rounds.iter().map(|r| r.metrics.clone()).collect();
    Ok(ProtocolReport { protocol: plan.protocol, rounds, aggregate: aggregate(&reports) })
}

pub const METRIC_COLUMNS: [&str; 5] = ["sens", "spec", "f1", "prec", "acc"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Header `round,sens,spec,f1,prec,acc`; undefined metrics are empty.
pub fn write_rounds_csv<W: Write>(out: W, rounds: &[RoundResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["round"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for r in rounds {
        let mut row = vec![r.label.clone()];
        row.extend(r.metrics.columns().map(opt));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `stat,sens,spec,f1,prec,acc` with rows `mean`, `std` and
/// `excluded` (rounds where the metric was undefined).
pub fn write_aggregate_csv<W: Write>(out: W, agg: &Aggregate) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["stat"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    let rows: [(&str, Box<dyn Fn(&MetricSummary) -> String>); 3] = [
        ("mean", Box::new(|m| opt(m.mean))),
        ("std", Box::new(|m| opt(m.std))),
        ("excluded", Box::new(|m| m.excluded.to_string())),
    ];
    for (name, f) in rows {
        let mut row = vec![name.to_string()];
        row.extend(agg.columns.iter().map(&*f));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-segment channel weights from the attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTable {
    pub channels: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AttentionTable {
    /// Header `segment_id` followed by the channel labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["segment_id".to_string()];
        header.extend(self.channels.iter().cloned());
        w.write_record(&header)?;
        for (id, weights) in &self.rows {
            let mut row = vec![id.clone()];
            row.extend(weights.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn export_attention_weights(
    params: &ModelParams,
    config: &ModelConfig,
    segments: &[&Segment],
    channels: &[&str],
) -> Result<AttentionTable> {
    if !config.attention_enabled {
        return Err(Error::Export(
            "the model was trained without the attention layer, so it has no channel weights".into(),
        ));
    }
    if channels.len() != config.n_ch {
        return Err(Error::Export(format!("{} channel labels for {} channels", channels.len(), config.n_ch)));
    }
    let mut rows = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(MICRO_BATCH) {
        let p = predict(params, config, &batch_tensor(chunk)?)?;
        for (s, w) in chunk.iter().zip(p.attention_weights.data().chunks(config.n_ch)) {
            rows.push((s.id(), w.to_vec()));
        }
    }
    Ok(AttentionTable { channels: channels.iter().map(|c| c.to_string()).collect(), rows })
}
