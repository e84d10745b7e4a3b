//! Straight-line reference evaluation of the network, shared by the oracle
//! and acceptance tests.
#![allow(dead_code)]

use attn_bilstm::autodiff::Tape;
use attn_bilstm::model::*;
use attn_bilstm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Seq = Vec<Vec<Vec<f64>>>; // [step][sample][feature]

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// One direction of Eqs. block input .. block output, written out per unit.
pub fn oracle_direction(xs: &Seq, p: &LstmDirectionParams) -> Seq {
    let h = p.hidden();
    let d = p.inputs();
    let n = xs[0].len();
    let mut y_prev = vec![vec![0.0; h]; n];
    let mut c_prev = vec![vec![0.0; h]; n];
    let mut out = Vec::new();
    for x_t in xs {
        let mut y_t = vec![vec![0.0; h]; n];
        let mut c_t = vec![vec![0.0; h]; n];
        for s in 0..n {
            for j in 0..h {
                let pre = |g: usize| {
                    let mut z = p.b[g].at(&[j]);
                    for k in 0..d {
                        z += x_t[s][k] * p.w[g].at(&[k, j]);
                    }
                    for k in 0..h {
                        z += y_prev[s][k] * p.r[g].at(&[k, j]);
                    }
                    z
                };
                let block = pre(CELL).tanh();
                let ig = sig(pre(INPUT_GATE));
                let fg = sig(pre(FORGET_GATE));
                let og = sig(pre(OUTPUT_GATE));
                c_t[s][j] = c_prev[s][j] * fg + block * ig;
                y_t[s][j] = c_t[s][j].tanh() * og;
            }
        }
        out.push(y_t.clone());
        y_prev = y_t;
        c_prev = c_t;
    }
    out
}

pub struct OracleOut {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

pub fn oracle_forward(config: &ModelConfig, p: &ModelParams, x: &Tensor) -> OracleOut {
    let (n, steps, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    // attention layer
    let mut weights = vec![vec![1.0; ch]; n];
    if let Some(att) = &p.attention {
        for s in 0..n {
            let mut acc = vec![0.0; ch];
            for t in 0..steps {
                let z: Vec<f64> = (0..ch)
                    .map(|c| att.b_al.at(&[c]) + (0..ch).map(|k| x.at(&[s, t, k]) * att.w_al.at(&[k, c])).sum::<f64>())
                    .collect();
                let a = match config.attention_nonlinearity {
                    AttentionNonlinearity::Softmax => softmax(&z),
                    AttentionNonlinearity::Sigmoid => z.iter().map(|v| sig(*v)).collect(),
                };
                for c in 0..ch {
                    acc[c] += a[c];
                }
            }
            weights[s] = acc.iter().map(|v| v / steps as f64).collect();
        }
    }
    // split into X_1 .. X_nsp
    let xs: Seq = (0..steps)
        .map(|t| (0..n).map(|s| (0..ch).map(|c| x.at(&[s, t, c]) * weights[s][c]).collect()).collect())
        .collect();
    let fd = oracle_direction(&xs, &p.forward_lstm);
    let blm: Seq = match &p.backward_lstm {
        None => fd,
        Some(bp) => {
            let reversed: Seq = xs.iter().rev().cloned().collect();
            let bd = oracle_direction(&reversed, bp);
            (0..steps)
                .map(|t| {
                    let b = &bd[steps - 1 - t]; // Y_bd(n_sp - t + 1) with 1-based t
                    (0..n)
                        .map(|s| match config.merge {
                            Merge::Concat => fd[t][s].iter().chain(&b[s]).copied().collect(),
                            Merge::Sum => fd[t][s].iter().zip(&b[s]).map(|(a, b)| a + b).collect(),
                        })
                        .collect()
                })
                .collect()
        }
    };
    let head = &p.head;
    let (f2, f3) = (head.w_dl.shape()[0], head.w_dl.shape()[1]);
    let mut pooled = vec![vec![0.0; f3]; n];
    for step in &blm {
        for s in 0..n {
            for j in 0..f3 {
                let mut v = head.b_dl.at(&[j]);
                for k in 0..f2 {
                    v += step[s][k] * head.w_dl.at(&[k, j]);
                }
                pooled[s][j] += v / steps as f64;
            }
        }
    }
    let nc = head.w_fcl.shape()[1];
    let logits: Vec<Vec<f64>> = pooled
        .iter()
        .map(|f| (0..nc).map(|c| head.b_fcl.at(&[c]) + (0..f3).map(|k| f[k] * head.w_fcl.at(&[k, c])).sum::<f64>()).collect())
        .collect();
    let probs = logits.iter().map(|l| softmax(l)).collect();
    OracleOut { logits, probs, weights }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(config, &mut rng);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn run(config: &ModelConfig, p: &ModelParams, x: &Tensor) -> (Tensor, Tensor, Option<Tensor>) {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let xv = tape.constant(x.clone());
    let out = model_forward(&mut tape, xv, &vars, config).unwrap();
    (
        tape.value(out.logits).clone(),
        tape.value(out.probs).clone(),
        out.attention_weights.map(|w| tape.value(w).clone()),
    )
}

pub fn assert_close(t: &Tensor, rows: &[Vec<f64>], tol: f64) {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    assert_eq!(t.len(), flat.len());
    for (a, b) in t.data().iter().zip(&flat) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }
}

pub fn variants() -> Vec<ModelConfig> {
    let base = ModelConfig::tiny();
    vec![
        base.clone(),
        ModelConfig { merge: Merge::Sum, ..base.clone() },
        ModelConfig { attention_nonlinearity: AttentionNonlinearity::Sigmoid, ..base.clone() },
        ModelConfig { attention_enabled: false, ..base.clone() },
        ModelConfig { bidirectional_enabled: false, ..base.clone() },
        ModelConfig { attention_enabled: false, bidirectional_enabled: false, ..base },
    ]
}


pub fn lstm_run(seq: &Tensor, fwd: &LstmDirectionParams, bwd: Option<&LstmDirectionParams>, merge: Merge) -> Tensor {
    let mut tape = Tape::new();
    let f = LstmVars::register(fwd, &mut tape);
    let b = bwd.map(|b| LstmVars::register(b, &mut tape));
    let x = tape.constant(seq.clone());
    let out = bilstm_forward(&mut tape, x, &f, b.as_ref(), merge).unwrap();
    tape.value(out).clone()
}

pub fn random_direction(d: usize, h: usize, seed: u64) -> LstmDirectionParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LstmDirectionParams::zeros(d, h);
    for t in p.w.iter_mut().chain(p.r.iter_mut()).chain(p.b.iter_mut()) {
        *t = random_tensor(t.shape(), &mut rng, 0.8);
    }
    p
}

pub fn reverse_time(t: &Tensor) -> Tensor {
    let (n, steps, f) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(t.len());
    for s in 0..n {
        for step in (0..steps).rev() {
            for k in 0..f {
                data.push(t.at(&[s, step, k]));
            }
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}
