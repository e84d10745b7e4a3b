//! The five stages of the network as tape operations.

use super::lstm::lstm_sequence;
use super::params::{AttentionVars, HeadVars, LstmVars};
use super::{AttentionNonlinearity, Merge};
use crate::autodiff::{Activation, Tape, Var};
use crate::error::{dim_err, Result};

/// Output of the channel attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Input scaled by the per-channel weights, `[n_sm, n_sp, n_ch]`.
    pub y: Var,
    /// Per-sample channel weights, `[n_sm, n_ch]`.
    pub weights: Var,
}

fn dims3(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *tape.value(x).shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(dim_err(format!("{what} expects a rank-3 tensor, got {s:?}"))),
    }
}

/// Channel attention: a dense layer over channels at every time step,
/// averaged over time into one weight per channel, which then scales the
/// input at every time step.
pub fn attention_forward(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    nonlinearity: AttentionNonlinearity,
) -> Result<AttentionOutput> {
    let (n_sm, n_sp, n_ch) = dims3(tape, x, "attention")?;
    let n_ss = n_sm * n_sp;
    let flat = tape.reshape(x, &[n_ss, n_ch])?;
    let proj = tape.matmul(flat, p.w_al)?;
    let bias = tape.broadcast_over_axis(p.b_al, 0, n_ss)?;
    let pre = tape.add(proj, bias)?;
    let act = match nonlinearity {
        AttentionNonlinearity::Softmax => Activation::Softmax,
        AttentionNonlinearity::Sigmoid => Activation::Sigmoid,
    };
    let scores = tape.activation(pre, act);
    let per_step = tape.reshape(scores, &[n_sm, n_sp, n_ch])?;
    let weights = tape.mean_over_axis(per_step, 1)?;
    let shared = tape.broadcast_over_axis(weights, 1, n_sp)?;
    let y = tape.mul(x, shared)?;
    Ok(AttentionOutput { y, weights })
}

/// Forward pass, then (optionally) a pass over the time-reversed sequence
/// whose outputs are flipped back so that output step `t` of both
/// directions refers to input step `t`.
pub fn bilstm_forward(
    tape: &mut Tape,
    seq: Var,
    fwd: &LstmVars,
    bwd: Option<&LstmVars>,
    merge: Merge,
) -> Result<Var> {
    dims3(tape, seq, "BiLSTM")?;
    let forward = lstm_sequence(tape, seq, fwd)?;
    let Some(bwd) = bwd else {
        return Ok(forward);
    };
    let fwd_h = tape.value(fwd.r[0]).shape()[0];
    let bwd_h = tape.value(bwd.r[0]).shape()[0];
    if fwd_h != bwd_h {
        return Err(dim_err(format!(
            "{merge:?} merge of hidden sizes {fwd_h} and {bwd_h}"
        )));
    }
    let reversed = tape.reverse_axis(seq, 1)?;
    let backward_rev = lstm_sequence(tape, reversed, bwd)?;
    let backward = tape.reverse_axis(backward_rev, 1)?;
    match merge {
        Merge::Concat => tape.concat(&[forward, backward], 2),
        Merge::Sum => tape.add(forward, backward),
    }
}

/// The same affine map applied independently at every time step.
pub fn time_distributed_fc(tape: &mut Tape, seq: Var, p: &HeadVars) -> Result<Var> {
    let (n_sm, n_sp, n_fe2) = dims3(tape, seq, "time-distributed layer")?;
    let w = tape.value(p.w_dl).shape();
    if w.len() != 2 || w[0] != n_fe2 {
        return Err(dim_err(format!(
            "time-distributed weights {w:?} for {n_fe2} input features"
        )));
    }
    let n_fe3 = w[1];
    let flat = tape.reshape(seq, &[n_sm * n_sp, n_fe2])?;
    let proj = tape.matmul(flat, p.w_dl)?;
    let bias = tape.broadcast_over_axis(p.b_dl, 0, n_sm * n_sp)?;
    let out = tape.add(proj, bias)?;
    tape.reshape(out, &[n_sm, n_sp, n_fe3])
}

/// Mean over the time axis.
pub fn average_pool(tape: &mut Tape, seq: Var) -> Result<Var> {
    dims3(tape, seq, "average pooling")?;
    tape.mean_over_axis(seq, 1)
}

/// Returns `(logits, probs)`.
pub fn classify_head(tape: &mut Tape, features: Var, p: &HeadVars) -> Result<(Var, Var)> {
    let n_sm = match *tape.value(features).shape() {
        [n, _] => n,
        ref s => return Err(dim_err(format!("head expects [n_sm, n_fe3], got {s:?}"))),
    };
    let proj = tape.matmul(features, p.w_fcl)?;
    let bias = tape.broadcast_over_axis(p.b_fcl, 0, n_sm)?;
    let logits = tape.add(proj, bias)?;
    let probs = tape.activation(logits, Activation::Softmax);
    Ok((logits, probs))
}
