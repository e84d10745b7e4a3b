//! Cross-entropy loss, RMSprop, and the mini-batch training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::dataset::{Label, Segment};
use crate::error::{dim_err, Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::model::{argmax_rows, model_forward, predict, ModelConfig, ModelParams};
use crate::seeds;
use crate::tensor::Tensor;

/// Largest number of segments sharing one tape. Bounds the memory held by
/// the LSTM's saved activations; batches are split into chunks of this size
/// and their gradients combined in order.
pub const MICRO_BATCH: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Rescale the full gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    /// RMSprop at learning rate 0.0013, batch 30, 35 epochs.
    fn default() -> Self {
        Self {
            learning_rate: 0.0013,
            batch_size: 30,
            epochs: 35,
            rho: 0.9,
            epsilon: 1e-7,
            seed: 0,
            shuffle: true,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho", "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm", "must be positive");
        }
        Ok(())
    }
}

/// Mean over rows of `-ln max(p_true, 1e-12)`. Each label row must be
/// one-hot.
pub fn cross_entropy_loss(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    if probs.shape() != labels.shape() || probs.rank() != 2 {
        return Err(dim_err(format!(
            "probabilities {:?} and labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    let c = probs.shape()[1];
    let mut total = 0.0;
    for (p, y) in probs.data().chunks(c).zip(labels.data().chunks(c)) {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Contract(format!("label row {y:?} is not one-hot")));
        }
        let k = y.iter().position(|&v| v == 1.0).expect("one-hot");
        total -= p[k].max(crate::autodiff::PROB_FLOOR).ln();
    }
    Ok(total / probs.shape()[0] as f64)
}

/// `s <- rho*s + (1-rho)*g^2; p <- p - lr*g/sqrt(s+eps)`, elementwise.
pub fn rmsprop_update(p: &mut Tensor, g: &Tensor, s: &mut Tensor, lr: f64, rho: f64, eps: f64) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != s.shape() {
        return Err(dim_err(format!(
            "parameter {:?}, gradient {:?}, accumulator {:?}",
            p.shape(),
            g.shape(),
            s.shape()
        )));
    }
    for ((pv, gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
        *sv = rho * *sv + (1.0 - rho) * gv * gv;
        *pv -= lr * gv / (*sv + eps).sqrt();
    }
    Ok(())
}

/// Running mean of squared gradients, one tensor per parameter in
/// [`ModelParams::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub accumulators: Vec<Tensor>,
}

impl RmsPropState {
    pub fn new(params: &ModelParams) -> Self {
        Self { accumulators: params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect() }
    }
}

pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut RmsPropState,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.accumulators.len() {
        return Err(dim_err(format!(
            "{} parameters, {} gradients, {} accumulators",
            tensors.len(),
            grads.len(),
            state.accumulators.len()
        )));
    }
    for ((p, g), s) in tensors.into_iter().zip(grads).zip(&mut state.accumulators) {
        rmsprop_update(p, g, s, lr, rho, eps)?;
    }
    Ok(())
}

/// Stacks segment data into `[n, n_sp, n_ch]`.
pub fn batch_tensor(segments: &[&Segment]) -> Result<Tensor> {
    let first = segments.first().ok_or_else(|| Error::Training("empty batch".into()))?;
    let shape = first.data.shape().to_vec();
    let mut data = Vec::with_capacity(segments.len() * first.data.len());
    for s in segments {
        if s.data.shape() != shape.as_slice() {
            return Err(dim_err(format!("segment {} is {:?}, expected {shape:?}", s.id(), s.data.shape())));
        }
        data.extend_from_slice(s.data.data());
    }
    Tensor::new(vec![segments.len(), shape[0], shape[1]], data)
}

/// Mean cross-entropy over `segments` and its gradient for every parameter,
/// in [`ModelParams::named`] order.
pub fn loss_and_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    segments: &[&Segment],
) -> Result<(f64, Vec<Tensor>)> {
    let n = segments.len();
    let chunks: Vec<Result<(f64, Vec<Tensor>)>> = segments
        .par_chunks(MICRO_BATCH)
        .map(|chunk| {
            let x = batch_tensor(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|s| s.label.class()).collect();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let xv = tape.constant(x);
            let out = model_forward(&mut tape, xv, &vars, config)?;
            let loss = tape.cross_entropy(out.probs, &targets)?;
            let value = tape.value(loss).item()?;
            let mut grads = tape.backward(loss)?;
            let w = chunk.len() as f64 / n as f64;
            let g = vars
                .flat()
                .into_iter()
                .map(|v| {
                    let mut t = grads.take(v).expect("parameter gradient");
                    t.data_mut().iter_mut().for_each(|x| *x *= w);
                    t
                })
                .collect();
            Ok((value * w, g))
        })
        .collect();

    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for c in chunks {
        let (loss, grads) = c?;
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let grads = sum.ok_or_else(|| Error::Training("empty batch".into()))?;
    Ok((total, grads))
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Predicted labels, evaluated [`MICRO_BATCH`] segments at a time.
pub fn predict_labels(params: &ModelParams, config: &ModelConfig, segments: &[&Segment]) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(MICRO_BATCH) {
        let p = predict(params, config, &batch_tensor(chunk)?)?;
        out.extend(argmax_rows(&p.probs).into_iter().map(Label::from_class));
    }
    Ok(out)
}

pub fn evaluate(params: &ModelParams, config: &ModelConfig, segments: &[&Segment]) -> Result<MetricsReport> {
    let predicted = predict_labels(params, config, segments)?;
    let truth: Vec<Label> = segments.iter().map(|s| s.label).collect();
    compute_metrics(&predicted, &truth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch, weighted by
    /// batch size.
    pub train_loss: f64,
    pub validation: MetricsReport,
}

/// Trains for `config.epochs` epochs and returns the final parameters with
/// the per-epoch history. The last mini-batch of an epoch may be short.
pub fn train(
    mut params: ModelParams,
    model: &ModelConfig,
    train_set: &[&Segment],
    validation: &[&Segment],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Training(format!(
            "{} training and {} validation segments; both must be non-empty",
            train_set.len(),
            validation.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config { key: "batch_size".into(), message: "must be at least 1".into() });
    }
    params.validate(model)?;
    let mut state = RmsPropState::new(&params);
    let mut shuffle_rng = seeds::stream(config.seed, seeds::SHUFFLE, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let segs: Vec<&Segment> = batch.iter().map(|&i| train_set[i]).collect();
            let (loss, mut grads) = loss_and_gradients(&params, model, &segs)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss became {loss} in epoch {epoch}")));
            }
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            rmsprop_step(&mut params, &grads, &mut state, config.learning_rate, config.rho, config.epsilon)?;
            loss_sum += loss * segs.len() as f64;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            validation: evaluate(&params, model, validation)?,
        });
    }
    Ok((params, history))
}

pub const HISTORY_HEADER: [&str; 7] = ["epoch", "train_loss", "val_sens", "val_spec", "val_prec", "val_f1", "val_acc"];

pub fn write_history_csv<W: Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let m = &r.validation;
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            opt(m.sensitivity),
            opt(m.specificity),
            opt(m.precision),
            opt(m.f1),
            opt(m.accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}
