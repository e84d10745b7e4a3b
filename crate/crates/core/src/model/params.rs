use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Gate order used for every per-gate array: block input, input gate,
/// forget gate, output gate.
pub const GATE_NAMES: [&str; 4] = ["ce", "ig", "fg", "og"];
pub const CELL: usize = 0;
pub const INPUT_GATE: usize = 1;
pub const FORGET_GATE: usize = 2;
pub const OUTPUT_GATE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `[n_ch, n_ch]`
    pub w_al: Tensor,
    /// `[n_ch]`, shared by every row.
    pub b_al: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirectionParams {
    /// Input weights `[n_ch, n_fe1]`, indexed by gate.
    pub w: [Tensor; 4],
    /// Recurrent weights `[n_fe1, n_fe1]`.
    pub r: [Tensor; 4],
    /// Biases `[n_fe1]`.
    pub b: [Tensor; 4],
}

impl LstmDirectionParams {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Tensor::zeros(&[inputs, hidden])),
            r: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.r[0].shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.w[0].shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `[n_fe2, n_fe3]`
    pub w_dl: Tensor,
    /// `[n_fe3]`
    pub b_dl: Tensor,
    /// `[n_fe3, n_c]`
    pub w_fcl: Tensor,
    /// `[n_c]`
    pub b_fcl: Tensor,
}

/// Every trainable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub attention: Option<AttentionParams>,
    pub forward_lstm: LstmDirectionParams,
    pub backward_lstm: Option<LstmDirectionParams>,
    pub head: HeadParams,
}

impl ModelParams {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (ch, h) = (config.n_ch, config.n_fe1);
        Self {
            attention: config.attention_enabled.then(|| AttentionParams {
                w_al: Tensor::zeros(&[ch, ch]),
                b_al: Tensor::zeros(&[ch]),
            }),
            forward_lstm: LstmDirectionParams::zeros(ch, h),
            backward_lstm: config
                .bidirectional_enabled
                .then(|| LstmDirectionParams::zeros(ch, h)),
            head: HeadParams {
                w_dl: Tensor::zeros(&[config.n_fe2(), config.n_fe3]),
                b_dl: Tensor::zeros(&[config.n_fe3]),
                w_fcl: Tensor::zeros(&[config.n_fe3, config.n_c]),
                b_fcl: Tensor::zeros(&[config.n_c]),
            },
        }
    }

    /// Random initialization: Glorot-uniform input, attention and head
    /// weights, orthogonal recurrent matrices, zero biases except a forget
    /// gate bias of one.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(config);
        if let Some(att) = params.attention.as_mut() {
            att.w_al = glorot_uniform(config.n_ch, config.n_ch, rng);
        }
        let init_direction = |dir: &mut LstmDirectionParams, rng: &mut R| {
            for g in 0..4 {
                dir.w[g] = glorot_uniform(config.n_ch, config.n_fe1, rng);
            }
            for g in 0..4 {
                dir.r[g] = orthogonal(config.n_fe1, rng);
            }
            dir.b[FORGET_GATE] = Tensor::ones(&[config.n_fe1]);
        };
        init_direction(&mut params.forward_lstm, rng);
        if let Some(bwd) = params.backward_lstm.as_mut() {
            init_direction(bwd, rng);
        }
        params.head.w_dl = glorot_uniform(config.n_fe2(), config.n_fe3, rng);
        params.head.w_fcl = glorot_uniform(config.n_fe3, config.n_c, rng);
        params
    }

    /// `(name, tensor)` pairs in a fixed order. Checkpoints, optimizer
    /// state and tape registration all follow this order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(att) = &self.attention {
            out.push(("attention.w_al".to_string(), &att.w_al));
            out.push(("attention.b_al".to_string(), &att.b_al));
        }
        push_direction(&mut out, "forward", &self.forward_lstm);
        if let Some(bwd) = &self.backward_lstm {
            push_direction(&mut out, "backward", bwd);
        }
        out.push(("head.w_dl".to_string(), &self.head.w_dl));
        out.push(("head.b_dl".to_string(), &self.head.b_dl));
        out.push(("head.w_fcl".to_string(), &self.head.w_fcl));
        out.push(("head.b_fcl".to_string(), &self.head.b_fcl));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(att) = self.attention.as_mut() {
            out.push(&mut att.w_al);
            out.push(&mut att.b_al);
        }
        let dir = &mut self.forward_lstm;
        out.extend(dir.w.iter_mut().chain(dir.r.iter_mut()).chain(dir.b.iter_mut()));
        if let Some(dir) = self.backward_lstm.as_mut() {
            out.extend(dir.w.iter_mut().chain(dir.r.iter_mut()).chain(dir.b.iter_mut()));
        }
        let head = &mut self.head;
        out.extend([
            &mut head.w_dl,
            &mut head.b_dl,
            &mut head.w_fcl,
            &mut head.b_fcl,
        ]);
        out
    }

    pub fn element_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor's shape against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let ours = self.named();
        let theirs = expected.named();
        if ours.len() != theirs.len() {
            return Err(dim_err(format!(
                "parameter set has {} tensors, config expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, t), (ename, e)) in ours.iter().zip(&theirs) {
            if name != ename || t.shape() != e.shape() {
                return Err(dim_err(format!(
                    "parameter {name} {:?} does not match {ename} {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        Ok(())
    }

    /// Puts every tensor on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let attention = self.attention.as_ref().map(|a| AttentionVars {
            w_al: tape.param(a.w_al.clone()),
            b_al: tape.param(a.b_al.clone()),
        });
        let forward_lstm = LstmVars::register(&self.forward_lstm, tape);
        let backward_lstm = self
            .backward_lstm
            .as_ref()
            .map(|d| LstmVars::register(d, tape));
        let head = HeadVars {
            w_dl: tape.param(self.head.w_dl.clone()),
            b_dl: tape.param(self.head.b_dl.clone()),
            w_fcl: tape.param(self.head.w_fcl.clone()),
            b_fcl: tape.param(self.head.b_fcl.clone()),
        };
        ModelVars {
            attention,
            forward_lstm,
            backward_lstm,
            head,
        }
    }
}

fn push_direction<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, d: &'a LstmDirectionParams) {
    for (kind, group) in [("w", &d.w), ("r", &d.r), ("b", &d.b)] {
        for (gate, t) in GATE_NAMES.iter().zip(group.iter()) {
            out.push((format!("{prefix}.{kind}_{gate}"), t));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_al: Var,
    pub b_al: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: [Var; 4],
    pub r: [Var; 4],
    pub b: [Var; 4],
}

impl LstmVars {
    pub fn register(p: &LstmDirectionParams, tape: &mut Tape) -> Self {
        Self {
            w: std::array::from_fn(|g| tape.param(p.w[g].clone())),
            r: std::array::from_fn(|g| tape.param(p.r[g].clone())),
            b: std::array::from_fn(|g| tape.param(p.b[g].clone())),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.w.iter().chain(&self.r).chain(&self.b).copied()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_dl: Var,
    pub b_dl: Var,
    pub w_fcl: Var,
    pub b_fcl: Var,
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub attention: Option<AttentionVars>,
    pub forward_lstm: LstmVars,
    pub backward_lstm: Option<LstmVars>,
    pub head: HeadVars,
}

impl ModelVars {
    /// Handles in the order of [`ModelParams::named`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.extend([a.w_al, a.b_al]);
        }
        out.extend(self.forward_lstm.all());
        if let Some(b) = &self.backward_lstm {
            out.extend(b.all());
        }
        let h = &self.head;
        out.extend([h.w_dl, h.b_dl, h.w_fcl, h.b_fcl]);
        out
    }
}

/// Number of trainable scalars implied by `config`, with every bias stored
/// as one value per output feature.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let (ch, h) = (config.n_ch, config.n_fe1);
    let attention = if config.attention_enabled {
        ch * ch + ch
    } else {
        0
    };
    let directions = if config.bidirectional_enabled { 2 } else { 1 };
    let lstm = directions * 4 * (ch * h + h * h + h);
    let td = config.n_fe2() * config.n_fe3 + config.n_fe3;
    let head = config.n_fe3 * config.n_c + config.n_c;
    attention + lstm + td + head
}

fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Orthogonal matrix from the QR factorization of a standard normal draw,
/// with column signs fixed by the diagonal of R.
fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut data = vec![0.0; n * n];
    for j in 0..n {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            data[i * n + j] = q[(i, j)] * sign;
        }
    }
    Tensor::new(vec![n, n], data).expect("orthogonal shape")
}
