//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`], so entries near zero are
/// compared in absolute terms. Central differences at `STEP` carry about
/// `1e-11` of round-off on an O(1) loss, which a smaller floor would
/// report as relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`, maximized over elements.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_gradient<F>(inputs: &[Tensor], which: usize, h: f64, f: F) -> Result<Tensor>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut grad = vec![0.0; n];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work[which].data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work[which].data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::new(inputs[which].shape().to_vec(), grad)
}

/// Builds `loss = sum(w ⊙ op(inputs))` for fixed random `w`, then compares
/// the tape gradient for every input against central differences.
/// Returns the worst relative error over all inputs.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, op: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.param(t.clone())).collect();
    let out = op(&mut probe, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = probe.value(out).shape().to_vec();
    let weights = random_tensor(&out_shape, &mut rng);

    let loss_of = |ts: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let y = op(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let weighted = tape.mul(y, w)?;
        let loss = tape.sum(weighted);
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = loss_of(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_gradient(inputs, i, STEP, |ts| {
            let (tape, _, loss) = loss_of(ts)?;
            tape.value(loss).item()
        })?;
        let analytic = grads.get(*v).expect("param gradient");
        worst = worst.max(relative_error(analytic, &numeric));
    }
    Ok(worst)
}

/// Worst relative error for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_relative_error: f64,
}

/// Cross-entropy loss of `model_forward` on a fixed batch.
pub fn model_loss(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    targets: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let out = model_forward(&mut tape, xv, &vars, config)?;
    let loss = tape.cross_entropy(out.probs, targets)?;
    tape.value(loss).item()
}

/// Compares every parameter group's analytic gradient with central
/// differences on a random batch of `n_sm` samples.
pub fn check_model_gradients(config: &ModelConfig, n_sm: usize, seed: u64) -> Result<Vec<GroupError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(config, &mut rng);
    let params = perturb_biases(params, &mut rng);
    let x = random_tensor(&[n_sm, config.n_sp, config.n_ch], &mut rng);
    let targets: Vec<usize> = (0..n_sm).map(|i| i % config.n_c).collect();

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let out = model_forward(&mut tape, xv, &vars, config)?;
    let loss = tape.cross_entropy(out.probs, &targets)?;
    let grads = tape.backward(loss)?;

    let flat = vars.flat();
    let named = params.named();
    let mut report = Vec::with_capacity(flat.len());
    for (idx, ((name, _), var)) in named.iter().zip(&flat).enumerate() {
        let analytic = grads.get(*var).expect("param gradient");
        let current = [params.named()[idx].1.clone()];
        let numeric = numeric_gradient(&current, 0, STEP, |ts| {
            let mut p = params.clone();
            *p.tensors_mut()[idx] = ts[0].clone();
            model_loss(config, &p, &x, &targets)
        })?;
        report.push(GroupError {
            name: name.clone(),
            max_relative_error: relative_error(analytic, &numeric),
        });
    }
    Ok(report)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("random tensor shape")
}

/// Zero biases make some gradient paths degenerate; give them small
/// random values so every group is exercised.
fn perturb_biases(mut params: ModelParams, rng: &mut ChaCha8Rng) -> ModelParams {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.contains(".b") {
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += 0.1 * z;
            }
        }
    }
    params
}
