//! Command-line front end: segment, train, eval, explain, gradcheck, synth.
//!
//! Settings resolve in three layers: built-in defaults, then a
//! `key = value` file given with `--config`, then command-line flags.
//! Every command writes one plain-text run manifest whose uncommented lines
//! form a valid config file, so `--config <manifest>` replays the run.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;

use crate::dataset::{
    read_archive, select_balanced, ArchiveReader, ArchiveWriter, CorpusManifest, Label, Segment,
};
use crate::edf::CANONICAL_CHANNELS;
use crate::error::{Error, Result};
use crate::eval::{
    export_attention_weights, plan_cross_patient, plan_cross_validation, run_protocol, write_aggregate_csv,
    write_rounds_csv, MetricsReport, Protocol,
};
use crate::gradcheck::check_model_gradients;
use crate::model::{
    count_parameters, load_checkpoint, save_checkpoint, AttentionNonlinearity, Merge, ModelConfig, ModelParams,
};
use crate::synthetic::{write_synthetic_dataset, SyntheticConfig};
use crate::train::{evaluate, train, write_history_csv, TrainConfig};
use crate::{dataset, seeds};

/// Overrides the data directory for `segment` when no path is given.
pub const DATA_ROOT_ENV: &str = "ATTN_BILSTM_DATA_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Largest per-group relative error accepted by `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "attn-bilstm", version, about = "Attention BiLSTM seizure detection on multichannel EEG")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Top-level seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Plain-text `key = value` config file (a previous run manifest works).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Drop the attention layer.
    #[arg(long, global = true)]
    pub ablate_attention: bool,
    /// Drop the backward LSTM direction.
    #[arg(long, global = true)]
    pub ablate_backward: bool,
    #[arg(long, global = true, value_enum)]
    pub merge: Option<MergeArg>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MergeArg {
    Concat,
    Sum,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Cv,
    CrossPatient,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Segment a directory of EDF recordings and summary files into archives.
    Segment {
        /// Data directory; falls back to $ATTN_BILSTM_DATA_ROOT.
        data_dir: Option<PathBuf>,
    },
    /// Train one model on an archive with a seeded 85:15 train/validation split.
    Train {
        archive: PathBuf,
        /// Resolve and print the configuration, write the manifest, then stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run an evaluation protocol on an archive.
    Eval {
        archive: PathBuf,
        #[arg(long, value_enum, default_value = "cv")]
        protocol: ProtocolArg,
    },
    /// Export per-segment channel attention weights.
    Explain { checkpoint: PathBuf, archive: PathBuf },
    /// Finite-difference gradient check of every parameter group.
    Gradcheck,
    /// Write a synthetic EDF dataset in the CHB-MIT layout.
    Synth {
        #[arg(long, default_value_t = 200)]
        segments: usize,
        #[arg(long, default_value_t = 3)]
        subjects: usize,
        #[arg(long, default_value_t = 32.0)]
        rate_hz: f64,
    },
}

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub n_fe1: usize,
    pub n_fe3: usize,
    pub merge: Merge,
    pub attention_enabled: bool,
    pub bidirectional_enabled: bool,
    pub attention_nonlinearity: AttentionNonlinearity,
    /// Rounds of the cross-validation protocol.
    pub rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let paper = ModelConfig::paper();
        Self {
            seed: 0,
            train: TrainConfig::default(),
            n_fe1: paper.n_fe1,
            n_fe3: paper.n_fe3,
            merge: paper.merge,
            attention_enabled: paper.attention_enabled,
            bidirectional_enabled: paper.bidirectional_enabled,
            attention_nonlinearity: paper.attention_nonlinearity,
            rounds: 10,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err(key, format!("cannot parse `{value}`")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "batch_size" => self.train.batch_size = parse_value(key, value)?,
            "epochs" => self.train.epochs = parse_value(key, value)?,
            "rho" => self.train.rho = parse_value(key, value)?,
            "epsilon" => self.train.epsilon = parse_value(key, value)?,
            "shuffle" => self.train.shuffle = parse_value(key, value)?,
            "clip_norm" => {
                self.train.clip_norm = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "n_fe1" => self.n_fe1 = parse_value(key, value)?,
            "n_fe3" => self.n_fe3 = parse_value(key, value)?,
            "merge" => {
                self.merge = match value {
                    "concat" => Merge::Concat,
                    "sum" => Merge::Sum,
                    _ => return Err(config_err(key, format!("expected concat or sum, got `{value}`"))),
                }
            }
            "attention" => self.attention_enabled = parse_value(key, value)?,
            "bidirectional" => self.bidirectional_enabled = parse_value(key, value)?,
            "attention_nonlinearity" => {
                self.attention_nonlinearity = match value {
                    "softmax" => AttentionNonlinearity::Softmax,
                    "sigmoid" => AttentionNonlinearity::Sigmoid,
                    _ => return Err(config_err(key, format!("expected softmax or sigmoid, got `{value}`"))),
                }
            }
            "rounds" => self.rounds = parse_value(key, value)?,
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a config file body. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(line, format!("line {} is not `key = value`", n + 1)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, g: &GlobalArgs) {
        if let Some(s) = g.seed {
            self.seed = s;
        }
        if g.ablate_attention {
            self.attention_enabled = false;
        }
        if g.ablate_backward {
            self.bidirectional_enabled = false;
        }
        match g.merge {
            Some(MergeArg::Concat) => self.merge = Merge::Concat,
            Some(MergeArg::Sum) => self.merge = Merge::Sum,
            None => {}
        }
    }

    pub fn resolve(g: &GlobalArgs) -> Result<Self> {
        let mut c = Self::default();
        if let Some(path) = &g.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err("config", format!("cannot read {}: {e}", path.display())))?;
            c.apply_text(&text)?;
        }
        c.apply_flags(g);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        TrainConfig { epochs: self.train.epochs.max(1), ..self.train.clone() }.validate()?;
        if self.train.epochs == 0 {
            return Err(config_err("epochs", "must be at least 1"));
        }
        if self.n_fe1 == 0 {
            return Err(config_err("n_fe1", "must be positive"));
        }
        if self.n_fe3 == 0 {
            return Err(config_err("n_fe3", "must be positive"));
        }
        if self.rounds == 0 {
            return Err(config_err("rounds", "must be at least 1"));
        }
        Ok(())
    }

    /// Model shape for inputs of `n_sp` steps over `n_ch` channels.
    pub fn model(&self, n_sp: usize, n_ch: usize) -> ModelConfig {
        ModelConfig {
            n_ch,
            n_sp,
            n_fe1: self.n_fe1,
            merge: self.merge,
            n_fe3: self.n_fe3,
            n_c: 2,
            attention_enabled: self.attention_enabled,
            bidirectional_enabled: self.bidirectional_enabled,
            attention_nonlinearity: self.attention_nonlinearity,
        }
    }

    /// Training settings with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// The settings as config-file lines.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "rho = {}", t.rho);
        let _ = writeln!(s, "epsilon = {}", t.epsilon);
        let _ = writeln!(s, "shuffle = {}", t.shuffle);
        let _ = writeln!(s, "clip_norm = {}", t.clip_norm.map_or("none".to_string(), |c| c.to_string()));
        let _ = writeln!(s, "n_fe1 = {}", self.n_fe1);
        let _ = writeln!(s, "n_fe3 = {}", self.n_fe3);
        let merge = match self.merge {
            Merge::Concat => "concat",
            Merge::Sum => "sum",
        };
        let _ = writeln!(s, "merge = {merge}");
        let _ = writeln!(s, "attention = {}", self.attention_enabled);
        let _ = writeln!(s, "bidirectional = {}", self.bidirectional_enabled);
        let nl = match self.attention_nonlinearity {
            AttentionNonlinearity::Softmax => "softmax",
            AttentionNonlinearity::Sigmoid => "sigmoid",
        };
        let _ = writeln!(s, "attention_nonlinearity = {nl}");
        let _ = writeln!(s, "rounds = {}", self.rounds);
        s
    }
}

/// Record of one command invocation. Facts about the run are comments;
/// the configuration lines can be fed back through `--config`.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub facts: Vec<(String, String)>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self { command: command.into(), facts: Vec::new(), config: config.clone() }
    }

    pub fn fact(&mut self, key: &str, value: impl ToString) {
        self.facts.push((key.into(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# attn-bilstm run manifest");
        let _ = writeln!(s, "# command = {}", self.command);
        let _ = writeln!(s, "# tool_version = {}", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.facts {
            for (i, line) in v.lines().enumerate() {
                if i == 0 {
                    let _ = writeln!(s, "# {k} = {line}");
                } else {
                    let _ = writeln!(s, "#   {line}");
                }
            }
        }
        s.push_str(&self.config.to_text());
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let config = RunConfig::resolve(&cli.global)?;
    let out = &cli.global.out_dir;
    let mut manifest = match &cli.command {
        Command::Segment { data_dir } => {
            let dir = match data_dir.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)) {
                Some(d) => d,
                None => return Err(config_err("data_dir", format!("no data directory given and {DATA_ROOT_ENV} is unset"))),
            };
            require_dir(&dir, "data_dir")?;
            std::fs::create_dir_all(out)?;
            cmd_segment(&dir, out, &config)?
        }
        Command::Train { archive, dry_run } => {
            require_file(archive, "archive")?;
            std::fs::create_dir_all(out)?;
            cmd_train(archive, out, &config, *dry_run)?
        }
        Command::Eval { archive, protocol } => {
            require_file(archive, "archive")?;
            std::fs::create_dir_all(out)?;
            let protocol = match protocol {
                ProtocolArg::Cv => Protocol::CrossValidation,
                ProtocolArg::CrossPatient => Protocol::CrossPatient,
            };
            cmd_eval(archive, protocol, out, &config)?
        }
        Command::Explain { checkpoint, archive } => {
            require_file(checkpoint, "checkpoint")?;
            require_file(archive, "archive")?;
            std::fs::create_dir_all(out)?;
            cmd_explain(checkpoint, archive, out, &config)?
        }
        Command::Gradcheck => cmd_gradcheck(&config)?,
        Command::Synth { segments, subjects, rate_hz } => {
            std::fs::create_dir_all(out)?;
            let cfg = SyntheticConfig {
                segments: *segments,
                subjects: *subjects,
                rate_hz: *rate_hz,
                seed: config.seed,
                ..SyntheticConfig::default()
            };
            let files = write_synthetic_dataset(out, &cfg)?;
            println!("wrote {} files to {}", files.len(), out.display());
            let mut m = RunManifest::new("synth", &config);
            m.fact("output_dir", out.display());
            m.fact("segments", segments);
            m.fact("subjects", subjects);
            m.fact("rate_hz", rate_hz);
            m
        }
    };
    manifest.fact("duration_s", format!("{:.3}", started.elapsed().as_secs_f64()));
    let name = match &cli.command {
        Command::Segment { .. } => "segment_manifest.txt",
        Command::Train { .. } => "train_manifest.txt",
        Command::Eval { .. } => "eval_manifest.txt",
        Command::Explain { .. } => "explain_manifest.txt",
        Command::Gradcheck => return Ok(()),
        Command::Synth { .. } => "synth_manifest.txt",
    };
    manifest.write(&out.join(name))
}

fn require_file(path: &Path, key: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(key, format!("{} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, key: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(config_err(key, format!("{} is not a directory", path.display())))
    }
}

/// Streams every segment to `full.segv`, then copies the balanced subset
/// to `balanced.segv`.
pub fn cmd_segment(dir: &Path, out: &Path, config: &RunConfig) -> Result<RunManifest> {
    let full_path = out.join("full.segv");
    let balanced_path = out.join("balanced.segv");
    let mut writer: Option<ArchiveWriter<BufWriter<File>>> = None;
    let mut labels = Vec::new();
    let report = dataset::segment_directory_canonical(dir, |s| {
        if writer.is_none() {
            let [n_sp, n_ch] = [s.data.shape()[0], s.data.shape()[1]];
            writer = Some(ArchiveWriter::create(&full_path, n_sp, n_ch)?);
        }
        labels.push(s.label);
        writer.as_mut().expect("writer").push(&s)
    })?;
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.file, s.reason);
    }
    if report.files_parsed == 0 {
        return Err(Error::Corpus(format!("no usable EDF files under {}", dir.display())));
    }
    let Some(writer) = writer else {
        return Err(Error::Corpus("recordings are shorter than one window".into()));
    };
    writer.finish()?;

    let keep = select_balanced(&labels, config.seed)?;
    let mut reader = ArchiveReader::open(&full_path)?;
    let mut balanced = ArchiveWriter::create(&balanced_path, reader.n_sp, reader.n_ch)?;
    let mut selected = Vec::with_capacity(keep.len());
    let mut next = keep.iter().peekable();
    let mut i = 0;
    while let Some(s) = reader.next_segment()? {
        if next.peek() == Some(&&i) {
            next.next();
            balanced.push(&s)?;
            selected.push(Segment { data: crate::tensor::Tensor::zeros(&[1]), ..s });
        }
        i += 1;
    }
    balanced.finish()?;

    let mut corpus = CorpusManifest::describe(&selected, config.seed);
    corpus.skipped_files = report.skipped.clone();
    let seizures = labels.iter().filter(|l| **l == Label::Seizure).count();
    println!(
        "{} files parsed, {} skipped; {} segments ({} seizure), balanced corpus {}",
        report.files_parsed,
        report.skipped.len(),
        labels.len(),
        seizures,
        selected.len()
    );

    let mut m = RunManifest::new("segment", config);
    m.fact("data_dir", dir.display());
    m.fact("full_archive", full_path.display());
    m.fact("balanced_archive", balanced_path.display());
    m.fact("files_parsed", report.files_parsed);
    m.fact("full_segments", labels.len());
    m.fact("full_seizure_segments", seizures);
    m.fact("balanced_corpus", corpus.to_text());
    Ok(m)
}

fn load_corpus(path: &Path) -> Result<(Vec<Segment>, usize, usize)> {
    let header = ArchiveReader::open(path)?;
    let (n_sp, n_ch) = (header.n_sp, header.n_ch);
    drop(header);
    let corpus = read_archive(path)?;
    if corpus.is_empty() {
        return Err(Error::Archive(format!("{} holds no segments", path.display())));
    }
    Ok((corpus, n_sp, n_ch))
}

fn format_metrics(m: &MetricsReport) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    format!(
        "sens {} spec {} prec {} f1 {} acc {}",
        f(m.sensitivity),
        f(m.specificity),
        f(m.precision),
        f(m.f1),
        f(m.accuracy)
    )
}

/// Indices `0..n` shuffled by the split stream, cut 85:15.
pub fn train_validation_split(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds::stream(seed, seeds::SPLIT, 0));
    let n_train = n * 85 / 100;
    if n_train == 0 || n_train == n {
        return Err(Error::Split(format!("{n} segments cannot be split 85:15")));
    }
    let validation = idx.split_off(n_train);
    Ok((idx, validation))
}

pub fn cmd_train(archive: &Path, out: &Path, config: &RunConfig, dry_run: bool) -> Result<RunManifest> {
    let (corpus, n_sp, n_ch) = load_corpus(archive)?;
    let model = config.model(n_sp, n_ch);
    model.validate()?;
    let tc = config.train_config();
    let n_params = count_parameters(&model);
    println!(
        "learning_rate {} batch_size {} epochs {} parameters {}",
        tc.learning_rate, tc.batch_size, tc.epochs, n_params
    );

    let mut m = RunManifest::new("train", config);
    m.fact("archive", archive.display());
    m.fact("segments", corpus.len());
    m.fact("n_sp", n_sp);
    m.fact("n_ch", n_ch);
    m.fact("parameter_count", n_params);
    if dry_run {
        return Ok(m);
    }

    let (train_idx, val_idx) = train_validation_split(corpus.len(), config.seed)?;
    let pick = |idx: &[usize]| -> Vec<&Segment> { idx.iter().map(|&i| &corpus[i]).collect() };
    let params = ModelParams::init(&model, &mut seeds::stream(config.seed, seeds::INIT, 0));
    let (params, history) = train(params, &model, &pick(&train_idx), &pick(&val_idx), &tc)?;
    let final_val = evaluate(&params, &model, &pick(&val_idx))?;
    println!("final validation: {}", format_metrics(&final_val));

    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &model, &params)?;
    let history_path = out.join("history.csv");
    write_history_csv(BufWriter::new(File::create(&history_path)?), &history)?;
    m.fact("train_segments", train_idx.len());
    m.fact("validation_segments", val_idx.len());
    m.fact("checkpoint", ckpt.display());
    m.fact("history", history_path.display());
    m.fact("final_validation", format_metrics(&final_val));
    Ok(m)
}

pub fn cmd_eval(archive: &Path, protocol: Protocol, out: &Path, config: &RunConfig) -> Result<RunManifest> {
    let (corpus, n_sp, n_ch) = load_corpus(archive)?;
    let model = config.model(n_sp, n_ch);
    let plan = match protocol {
        Protocol::CrossValidation => plan_cross_validation(corpus.len(), config.rounds, config.seed)?,
        Protocol::CrossPatient => {
            let cases: Vec<&str> = corpus.iter().map(|s| s.case_id.as_str()).collect();
            let labels: Vec<Label> = corpus.iter().map(|s| s.label).collect();
            plan_cross_patient(&cases, &labels, config.seed)?
        }
    };
    let report = run_protocol(&plan, &corpus, &model, &config.train_config())?;
    for r in &report.rounds {
        println!("round {}: {}", r.label, format_metrics(&r.metrics));
    }
    let rounds_path = out.join("rounds.csv");
    let aggregate_path = out.join("aggregate.csv");
    write_rounds_csv(BufWriter::new(File::create(&rounds_path)?), &report.rounds)?;
    write_aggregate_csv(BufWriter::new(File::create(&aggregate_path)?), &report.aggregate)?;

    let mut m = RunManifest::new("eval", config);
    m.fact("archive", archive.display());
    m.fact("protocol", protocol.name());
    m.fact("segments", corpus.len());
    m.fact("parameter_count", count_parameters(&model));
    m.fact("rounds_completed", report.rounds.len());
    let seeds: Vec<String> = report.rounds.iter().map(|r| format!("{}:{}", r.label, r.seed)).collect();
    m.fact("round_seeds", seeds.join(" "));
    m.fact("rounds_csv", rounds_path.display());
    m.fact("aggregate_csv", aggregate_path.display());
    Ok(m)
}

pub fn cmd_explain(checkpoint: &Path, archive: &Path, out: &Path, config: &RunConfig) -> Result<RunManifest> {
    let (model, params) = load_checkpoint(checkpoint)?;
    let (corpus, _, n_ch) = load_corpus(archive)?;
    if n_ch != model.n_ch {
        return Err(Error::Export(format!("archive has {n_ch} channels, checkpoint expects {}", model.n_ch)));
    }
    let generic: Vec<String> = (0..n_ch).map(|c| format!("ch{c}")).collect();
    let labels: Vec<&str> = if n_ch == CANONICAL_CHANNELS.len() {
        CANONICAL_CHANNELS.to_vec()
    } else {
        generic.iter().map(String::as_str).collect()
    };
    let refs: Vec<&Segment> = corpus.iter().collect();
    let table = export_attention_weights(&params, &model, &refs, &labels)?;
    let path = out.join("attention.csv");
    table.write_csv(BufWriter::new(File::create(&path)?))?;
    println!("wrote attention weights for {} segments to {}", table.rows.len(), path.display());

    let mut m = RunManifest::new("explain", config);
    m.fact("checkpoint", checkpoint.display());
    m.fact("archive", archive.display());
    m.fact("segments", table.rows.len());
    m.fact("attention_csv", path.display());
    Ok(m)
}

pub fn cmd_gradcheck(config: &RunConfig) -> Result<RunManifest> {
    let model = ModelConfig {
        merge: config.merge,
        attention_enabled: config.attention_enabled,
        bidirectional_enabled: config.bidirectional_enabled,
        attention_nonlinearity: config.attention_nonlinearity,
        ..ModelConfig::tiny()
    };
    let groups = check_model_gradients(&model, 2, config.seed)?;
    let mut worst = 0.0f64;
    for g in &groups {
        println!("{:<24} {:.3e}", g.name, g.max_relative_error);
        worst = worst.max(g.max_relative_error);
    }
    println!("max relative error {worst:.3e}");
    if !(worst <= GRADCHECK_TOLERANCE) {
        return Err(Error::Training(format!("gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(RunManifest::new("gradcheck", config))
}
