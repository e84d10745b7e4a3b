//! Attention BiLSTM classifier.
//!
//! Stages, in order: channel attention, bidirectional LSTM, a time-distributed
//! dense layer, average pooling over time, and a dense softmax head. The
//! attention stage and the backward direction can each be switched off.

mod checkpoint;
mod layers;
mod lstm;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{
    attention_forward, average_pool, bilstm_forward, classify_head, time_distributed_fc,
    AttentionOutput,
};
pub use lstm::{lstm_sequence, lstm_step};
pub use params::{
    count_parameters, AttentionParams, AttentionVars, HeadParams, HeadVars, LstmDirectionParams,
    LstmVars, ModelParams, ModelVars, CELL, FORGET_GATE, GATE_NAMES, INPUT_GATE, OUTPUT_GATE,
};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    Concat,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionNonlinearity {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_ch: usize,
    /// Time steps per segment. Only used to validate inputs and recorded in
    /// checkpoints; the layers themselves accept any length.
    pub n_sp: usize,
    /// Hidden size of each LSTM direction.
    pub n_fe1: usize,
    pub merge: Merge,
    /// Width of the time-distributed layer.
    pub n_fe3: usize,
    pub n_c: usize,
    pub attention_enabled: bool,
    pub bidirectional_enabled: bool,
    pub attention_nonlinearity: AttentionNonlinearity,
}

impl ModelConfig {
    /// 17 channels, 23 s at 256 Hz, 140 hidden units per direction,
    /// concatenated, 70 time-distributed features, two classes.
    pub fn paper() -> Self {
        Self {
            n_ch: 17,
            n_sp: 5888,
            n_fe1: 140,
            merge: Merge::Concat,
            n_fe3: 70,
            n_c: 2,
            attention_enabled: true,
            bidirectional_enabled: true,
            attention_nonlinearity: AttentionNonlinearity::Softmax,
        }
    }

    /// Small configuration used by gradient and oracle checks.
    pub fn tiny() -> Self {
        Self {
            n_ch: 3,
            n_sp: 4,
            n_fe1: 5,
            n_fe3: 4,
            ..Self::paper()
        }
    }

    /// Width of the merged BiLSTM output.
    pub fn n_fe2(&self) -> usize {
        match (self.bidirectional_enabled, self.merge) {
            (true, Merge::Concat) => 2 * self.n_fe1,
            _ => self.n_fe1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_ch", self.n_ch),
            ("n_sp", self.n_sp),
            ("n_fe1", self.n_fe1),
            ("n_fe3", self.n_fe3),
            ("n_c", self.n_c),
        ];
        for (key, v) in sizes {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    message: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Tape handles produced by [`model_forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
    /// `[n_sm, n_ch]` channel weights; `None` when attention is disabled.
    pub attention_weights: Option<Var>,
}

/// Full forward pass on `x: [n_sm, n_sp, n_ch]`.
pub fn model_forward(
    tape: &mut Tape,
    x: Var,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<ForwardVars> {
    let shape = tape.value(x).shape();
    if shape.len() != 3 || shape[2] != config.n_ch {
        return Err(dim_err(format!(
            "model input {shape:?} for {} channels",
            config.n_ch
        )));
    }
    if config.attention_enabled != vars.attention.is_some()
        || config.bidirectional_enabled != vars.backward_lstm.is_some()
    {
        return Err(Error::Contract(
            "parameters do not match the configured ablations".into(),
        ));
    }
    let (seq, attention_weights) = match &vars.attention {
        Some(att) => {
            let out = attention_forward(tape, x, att, config.attention_nonlinearity)?;
            (out.y, Some(out.weights))
        }
        None => (x, None),
    };
    let merged = bilstm_forward(
        tape,
        seq,
        &vars.forward_lstm,
        vars.backward_lstm.as_ref(),
        config.merge,
    )?;
    let td = time_distributed_fc(tape, merged, &vars.head)?;
    let pooled = average_pool(tape, td)?;
    let (logits, probs) = classify_head(tape, pooled, &vars.head)?;
    Ok(ForwardVars {
        logits,
        probs,
        attention_weights,
    })
}

/// Inference result for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: Vec<usize>,
    /// `[n_sm, n_ch]`; all ones when attention is disabled.
    pub attention_weights: Tensor,
}

/// Runs the model on a batch without keeping the tape.
pub fn predict(params: &ModelParams, config: &ModelConfig, x: &Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let out = model_forward(&mut tape, xv, &vars, config)?;
    let probs = tape.value(out.probs).clone();
    let labels = argmax_rows(&probs);
    let attention_weights = match out.attention_weights {
        Some(w) => tape.value(w).clone(),
        None => Tensor::ones(&[x.shape()[0], config.n_ch]),
    };
    Ok(Prediction {
        probs,
        labels,
        attention_weights,
    })
}

/// Column of the largest entry in each row; ties go to the lower index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape().last().copied().unwrap_or(1);
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
