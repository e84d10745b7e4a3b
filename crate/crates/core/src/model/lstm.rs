//! LSTM recurrences.
//!
//! [`lstm_step`] spells out one step with primitive tape operations.
//! [`lstm_sequence`] runs a whole direction as a single fused tape node with
//! a hand-written backpropagation-through-time sweep; it must agree with
//! repeated `lstm_step` calls, which the tests check.

use super::params::{LstmVars, CELL, FORGET_GATE, INPUT_GATE, OUTPUT_GATE};
use crate::autodiff::{Activation, FusedOp, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, sigmoid, Tensor};

/// One LSTM step for a batch: returns `(y_t, c_t)`.
///
/// `x_t` is `[n_sm, n_in]`, the states are `[n_sm, hidden]`.
pub fn lstm_step(
    tape: &mut Tape,
    x_t: Var,
    prev_y: Var,
    prev_c: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let n = tape.value(x_t).shape()[0];
    let gate = |tape: &mut Tape, g: usize, act: Activation| -> Result<Var> {
        let xw = tape.matmul(x_t, p.w[g])?;
        let yr = tape.matmul(prev_y, p.r[g])?;
        let s = tape.add(xw, yr)?;
        let b = tape.broadcast_over_axis(p.b[g], 0, n)?;
        let z = tape.add(s, b)?;
        Ok(tape.activation(z, act))
    };
    let block_input = gate(tape, CELL, Activation::Tanh)?;
    let input_gate = gate(tape, INPUT_GATE, Activation::Sigmoid)?;
    let forget_gate = gate(tape, FORGET_GATE, Activation::Sigmoid)?;
    let output_gate = gate(tape, OUTPUT_GATE, Activation::Sigmoid)?;

    let kept = tape.mul(prev_c, forget_gate)?;
    let written = tape.mul(block_input, input_gate)?;
    let c_t = tape.add(kept, written)?;
    let squashed = tape.activation(c_t, Activation::Tanh);
    let y_t = tape.mul(squashed, output_gate)?;
    Ok((y_t, c_t))
}

/// Runs one LSTM direction over `x: [n_sm, n_sp, n_in]` from zero initial
/// state and returns the block outputs `[n_sm, n_sp, hidden]`.
pub fn lstm_sequence(tape: &mut Tape, x: Var, p: &LstmVars) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 3 {
        return Err(dim_err(format!("LSTM input must be [n_sm, n_sp, n_in], got {xs:?}")));
    }
    let (n, steps, d) = (xs[0], xs[1], xs[2]);
    let h = tape.value(p.r[0]).shape()[0];
    for g in 0..4 {
        let (w, r, b) = (
            tape.value(p.w[g]).shape(),
            tape.value(p.r[g]).shape(),
            tape.value(p.b[g]).shape(),
        );
        if w != [d, h] || r != [h, h] || b != [h] {
            return Err(dim_err(format!(
                "LSTM gate {g} weights {w:?}/{r:?}/{b:?} for input width {d}, hidden {h}"
            )));
        }
    }

    let mut inputs = vec![x];
    inputs.extend(p.all());
    let values: Vec<&Tensor> = inputs.iter().map(|v| tape.value(*v)).collect();
    let packed = Packed::new(&values[1..], d, h);
    let kernel = SequenceKernel { n, steps, d, h };
    let (output, saved) = kernel.forward(values[0].data(), &packed);
    let value = Tensor::new(vec![n, steps, h], output)?;
    Ok(tape.fused(&inputs, value, Box::new(LstmSequenceOp { kernel, saved })))
}

/// Gate-packed weights: `w [d, 4h]`, `r [h, 4h]`, `b [4h]`.
struct Packed {
    w: Vec<f64>,
    r: Vec<f64>,
    b: Vec<f64>,
}

impl Packed {
    /// `params` holds the twelve tensors in `w, r, b` order, four gates each.
    fn new(params: &[&Tensor], d: usize, h: usize) -> Self {
        let pack = |group: &[&Tensor], rows: usize| {
            let mut out = vec![0.0; rows * 4 * h];
            for (g, t) in group.iter().enumerate() {
                for row in 0..rows {
                    out[row * 4 * h + g * h..row * 4 * h + (g + 1) * h]
                        .copy_from_slice(&t.data()[row * h..(row + 1) * h]);
                }
            }
            out
        };
        Self {
            w: pack(&params[0..4], d),
            r: pack(&params[4..8], h),
            b: pack(&params[8..12], 1),
        }
    }
}

#[derive(Clone, Copy)]
struct SequenceKernel {
    n: usize,
    steps: usize,
    d: usize,
    h: usize,
}

/// Per-step activations kept for the backward sweep.
struct Saved {
    /// `[steps][n][4h]` post-activation gate values.
    gates: Vec<f64>,
    /// `[steps][n][h]` cell states.
    cells: Vec<f64>,
}

impl SequenceKernel {
    fn forward(&self, x: &[f64], p: &Packed) -> (Vec<f64>, Saved) {
        let SequenceKernel { n, steps, d, h } = *self;
        let h4 = 4 * h;
        // input projection for every (sample, step) row at once
        let mut xproj = vec![0.0; n * steps * h4];
        gemm_acc(x, &p.w, &mut xproj, n * steps, d, h4);

        let mut out = vec![0.0; n * steps * h];
        let mut gates = vec![0.0; steps * n * h4];
        let mut cells = vec![0.0; steps * n * h];
        let mut y_prev = vec![0.0; n * h];
        let mut c_prev = vec![0.0; n * h];
        let mut z = vec![0.0; n * h4];

        for t in 0..steps {
            for s in 0..n {
                let src = &xproj[(s * steps + t) * h4..(s * steps + t + 1) * h4];
                let dst = &mut z[s * h4..(s + 1) * h4];
                for ((zv, xv), bv) in dst.iter_mut().zip(src).zip(&p.b) {
                    *zv = xv + bv;
                }
            }
            if t > 0 {
                gemm_acc(&y_prev, &p.r, &mut z, n, h, h4);
            }
            let g_t = &mut gates[t * n * h4..(t + 1) * n * h4];
            let c_t = &mut cells[t * n * h..(t + 1) * n * h];
            for s in 0..n {
                let zr = &z[s * h4..(s + 1) * h4];
                let gr = &mut g_t[s * h4..(s + 1) * h4];
                for j in 0..h {
                    gr[j] = zr[j].tanh();
                    gr[h + j] = sigmoid(zr[h + j]);
                    gr[2 * h + j] = sigmoid(zr[2 * h + j]);
                    gr[3 * h + j] = sigmoid(zr[3 * h + j]);
                    let c = c_prev[s * h + j] * gr[2 * h + j] + gr[j] * gr[h + j];
                    c_t[s * h + j] = c;
                    let y = c.tanh() * gr[3 * h + j];
                    y_prev[s * h + j] = y;
                    out[(s * steps + t) * h + j] = y;
                }
            }
            c_prev.copy_from_slice(c_t);
        }
        (out, Saved { gates, cells })
    }

    /// Returns packed gradients `(dx, dw, dr, db)`.
    fn backward(
        &self,
        x: &[f64],
        out: &[f64],
        p: &Packed,
        saved: &Saved,
        dout: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let SequenceKernel { n, steps, d, h } = *self;
        let h4 = 4 * h;
        let mut dz_all = vec![0.0; n * steps * h4];
        let mut dr = vec![0.0; h * h4];
        let mut dy_next = vec![0.0; n * h];
        let mut dc_next = vec![0.0; n * h];
        let mut dz = vec![0.0; n * h4];
        let mut y_prev = vec![0.0; n * h];

        for t in (0..steps).rev() {
            let g_t = &saved.gates[t * n * h4..(t + 1) * n * h4];
            let c_t = &saved.cells[t * n * h..(t + 1) * n * h];
            for s in 0..n {
                let gr = &g_t[s * h4..(s + 1) * h4];
                let dzr = &mut dz[s * h4..(s + 1) * h4];
                for j in 0..h {
                    let k = s * h + j;
                    let c_prev = if t > 0 {
                        saved.cells[(t - 1) * n * h + k]
                    } else {
                        0.0
                    };
                    let (a, i, f, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let tc = c_t[k].tanh();
                    let dy = dout[(s * steps + t) * h + j] + dy_next[k];
                    let dc = dc_next[k] + dy * o * (1.0 - tc * tc);
                    dzr[j] = dc * i * (1.0 - a * a);
                    dzr[h + j] = dc * a * i * (1.0 - i);
                    dzr[2 * h + j] = dc * c_prev * f * (1.0 - f);
                    dzr[3 * h + j] = dy * tc * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
            }
            for s in 0..n {
                dz_all[(s * steps + t) * h4..(s * steps + t + 1) * h4]
                    .copy_from_slice(&dz[s * h4..(s + 1) * h4]);
            }
            dy_next.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                for s in 0..n {
                    y_prev[s * h..(s + 1) * h]
                        .copy_from_slice(&out[(s * steps + t - 1) * h..(s * steps + t) * h]);
                }
                gemm_at_b_acc(&y_prev, &dz, &mut dr, n, h, h4);
                gemm_a_bt_acc(&dz, &p.r, &mut dy_next, n, h4, h);
            }
        }

        let rows = n * steps;
        let mut dw = vec![0.0; d * h4];
        gemm_at_b_acc(x, &dz_all, &mut dw, rows, d, h4);
        let mut dx = vec![0.0; rows * d];
        gemm_a_bt_acc(&dz_all, &p.w, &mut dx, rows, h4, d);
        let mut db = vec![0.0; h4];
        for row in dz_all.chunks(h4) {
            for (b, v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
        (dx, dw, dr, db)
    }
}

struct LstmSequenceOp {
    kernel: SequenceKernel,
    saved: Saved,
}

impl FusedOp for LstmSequenceOp {
    fn name(&self) -> &'static str {
        "lstm_sequence"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let SequenceKernel { d, h, .. } = self.kernel;
        let packed = Packed::new(&inputs[1..], d, h);
        let (dx, dw, dr, db) = self.kernel.backward(
            inputs[0].data(),
            output.data(),
            &packed,
            &self.saved,
            grad_output,
        );
        let unpack = |packed: &[f64], rows: usize, g: usize| {
            let mut out = Vec::with_capacity(rows * h);
            for row in 0..rows {
                out.extend_from_slice(&packed[row * 4 * h + g * h..row * 4 * h + (g + 1) * h]);
            }
            out
        };
        let mut grads = Vec::with_capacity(13);
        grads.push(needs_grad[0].then_some(dx));
        for g in 0..4 {
            grads.push(Some(unpack(&dw, d, g)));
        }
        for g in 0..4 {
            grads.push(Some(unpack(&dr, h, g)));
        }
        for g in 0..4 {
            grads.push(Some(unpack(&db, 1, g)));
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{LstmDirectionParams, FORGET_GATE, INPUT_GATE};

    fn scalar_unit() -> LstmDirectionParams {
        let mut p = LstmDirectionParams::zeros(1, 1);
        for g in 0..4 {
            p.w[g] = Tensor::matrix(&[&[1.0]]);
        }
        p
    }

    #[test]
    fn zero_params_are_a_fixed_point() {
        let p = LstmDirectionParams::zeros(3, 4);
        let mut tape = Tape::new();
        let vars = LstmVars::register(&p, &mut tape);
        let x = tape.constant(Tensor::full(&[2, 3], 0.7));
        let y0 = tape.constant(Tensor::zeros(&[2, 4]));
        let c0 = tape.constant(Tensor::zeros(&[2, 4]));
        let (y, c) = lstm_step(&mut tape, x, y0, c0, &vars).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[2, 4]));
        assert_eq!(tape.value(c), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn scalar_unit_hand_values() {
        let p = scalar_unit();
        let mut tape = Tape::new();
        let vars = LstmVars::register(&p, &mut tape);
        let x = tape.constant(Tensor::matrix(&[&[1.0]]));
        let zero = tape.constant(Tensor::zeros(&[1, 1]));
        let (y, c) = lstm_step(&mut tape, x, zero, zero, &vars).unwrap();
        let block = 1f64.tanh();
        let gate = 1.0 / (1.0 + (-1f64).exp());
        assert!((block - 0.761594).abs() < 1e-6);
        assert!((gate - 0.731059).abs() < 1e-6);
        let c_val = tape.value(c).item().unwrap();
        // tanh(1)·σ(1) and tanh(c)·σ(1), evaluated independently in f64
        assert!((c_val - 0.556770).abs() < 1e-6, "{c_val}");
        assert!((c_val - block * gate).abs() < 1e-15);
        let y_val = tape.value(y).item().unwrap();
        assert!((y_val - 0.369606).abs() < 1e-6, "{y_val}");
    }

    #[test]
    fn saturated_gates_hold_the_cell() {
        let mut p = LstmDirectionParams::zeros(2, 3);
        p.b[INPUT_GATE] = Tensor::full(&[3], -50.0);
        p.b[FORGET_GATE] = Tensor::full(&[3], 50.0);
        p.w[CELL] = Tensor::full(&[2, 3], 0.9);
        let mut tape = Tape::new();
        let vars = LstmVars::register(&p, &mut tape);
        let x = tape.constant(Tensor::full(&[1, 2], 3.0));
        let y0 = tape.constant(Tensor::zeros(&[1, 3]));
        let prev = Tensor::vector(&[0.4, -1.2, 2.0]).reshape(&[1, 3]).unwrap();
        let c0 = tape.constant(prev.clone());
        let (_, c) = lstm_step(&mut tape, x, y0, c0, &vars).unwrap();
        assert!(tape.value(c).max_abs_diff(&prev) < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = LstmDirectionParams::zeros(3, 4);
        let mut tape = Tape::new();
        let vars = LstmVars::register(&p, &mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 5, 2]));
        assert!(lstm_sequence(&mut tape, x, &vars).is_err());
        let x2 = tape.constant(Tensor::zeros(&[2, 2]));
        let y0 = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(lstm_step(&mut tape, x2, y0, y0, &vars).is_err());
    }
}
