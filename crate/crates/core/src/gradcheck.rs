//! Central finite-difference checks of every taped operation.
//!
//! Each check builds a scalar `L = Σ R ∘ op(inputs)` with a fixed random
//! weighting `R`, differentiates it on the tape, and compares against
//! `(L(x + h) - L(x - h)) / 2h` element by element.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::attention::spatial_attention;
use crate::error::Result;
use crate::model::{ForwardOptions, SmallCnn, SmallCnnConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to roundoff are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-6;
/// Redraws of the full-model instance before giving up on finding one
/// without kinks near the stencil.
const MAX_DRAWS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_error: f64,
}

/// Deliberate corruption of one op's analytic gradient, used to confirm the
/// suite can fail.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub op: String,
    pub relative_bias: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Largest relative error between the tape gradient of `build` and central
/// differences, over all elements of all `inputs`.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    grad_check_biased(inputs, h, 0.0, build)
}

fn grad_check_biased(
    inputs: &[Tensor<f64>],
    h: f64,
    bias: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    Ok(grad_check_inner(inputs, h, bias, false, build)?.expect("kinks are not screened"))
}

/// With `screen_kinks`, returns `None` as soon as a failing error coincides with
/// second differences that do not scale quadratically, meaning the stencil
/// straddles a kink.
fn grad_check_inner(
    inputs: &[Tensor<f64>],
    h: f64,
    bias: f64,
    screen_kinks: bool,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Option<f64>> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let center = tape.value(out).item();
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v)?.clone();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i] * (1.0 + bias);
            let err = relative_error(a, numeric);
            if screen_kinks && err > DEFAULT_TOLERANCE {
                probe[k].data_mut()[i] = orig + h / 2.0;
                let half_up = eval(&probe)?;
                probe[k].data_mut()[i] = orig - h / 2.0;
                let half_down = eval(&probe)?;
                probe[k].data_mut()[i] = orig;
                // Smooth: the second difference scales as h^2.
                let curvature_gap = ((up - 2.0 * center + down) - 4.0 * (half_up - 2.0 * center + half_down)).abs();
                let roundoff = 64.0 * f64::EPSILON * center.abs();
                if curvature_gap > 0.1 * 2.0 * h * (a - numeric).abs() + roundoff {
                    return Ok(None);
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(Some(worst))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values whose magnitude stays at least `gap` away from zero, so
/// kinks at the origin are not straddled by the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least `gap` apart, shuffled; keeps max
/// selections stable under the stencil.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// `Σ R ∘ y` with `R` a fixed random tensor of `y`'s shape.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, tape.value(y).shape(), -1.0, 1.0);
    let r = tape.leaf(r, false);
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

/// Names of every check in [`run_suite`], in execution order.
pub const SUITE: [&str; 18] = [
    "conv2d",
    "conv2d_stride2",
    "channel_pool",
    "max_pool2",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "mul_broadcast",
    "scale",
    "add_scalar",
    "channel_affine",
    "linear",
    "global_avg_pool",
    "sum",
    "softmax_cross_entropy",
    "spatial_attention",
    "small_cnn_loss",
];

fn check_one(name: &str, seed: u64, h: f64, bias: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let ws = |tape: &mut Tape<f64>, y: Var| weighted_sum(tape, y, seed);
    match name {
        "conv2d" => {
            let x = uniform(rng, &[2, 3, 5, 5], -1.0, 1.0);
            let w = uniform(rng, &[4, 3, 3, 3], -1.0, 1.0);
            let b = uniform(rng, &[4], -1.0, 1.0);
            grad_check_biased(&[x, w, b], h, bias, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                ws(t, y)
            })
        }
        "conv2d_stride2" => {
            let x = uniform(rng, &[2, 2, 7, 7], -1.0, 1.0);
            let w = uniform(rng, &[3, 2, 5, 5], -1.0, 1.0);
            let b = uniform(rng, &[3], -1.0, 1.0);
            grad_check_biased(&[x, w, b], h, bias, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 2)?;
                ws(t, y)
            })
        }
        "channel_pool" => {
            let x = distinct(rng, &[2, 3, 4, 4], 1e-2);
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.channel_pool(v[0])?;
                ws(t, y)
            })
        }
        "max_pool2" => {
            let x = distinct(rng, &[2, 2, 4, 6], 1e-2);
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.max_pool2(v[0])?;
                ws(t, y)
            })
        }
        "relu" => {
            let x = away_from_zero(rng, &[3, 7], 1e-3);
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.relu(v[0])?;
                ws(t, y)
            })
        }
        "sigmoid" => {
            let x = uniform(rng, &[3, 7], -6.0, 6.0);
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.sigmoid(v[0])?;
                ws(t, y)
            })
        }
        "add" => {
            let a = uniform(rng, &[2, 5], -1.0, 1.0);
            let b = uniform(rng, &[2, 5], -1.0, 1.0);
            grad_check_biased(&[a, b], h, bias, |t, v| {
                let y = t.add(v[0], v[1])?;
                ws(t, y)
            })
        }
        "mul" => {
            let a = uniform(rng, &[2, 5], -1.0, 1.0);
            let b = uniform(rng, &[2, 5], -1.0, 1.0);
            grad_check_biased(&[a, b], h, bias, |t, v| {
                let y = t.mul(v[0], v[1])?;
                ws(t, y)
            })
        }
        "mul_broadcast" => {
            let a = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
            let b = uniform(rng, &[2, 1, 4, 4], 0.0, 1.0);
            grad_check_biased(&[a, b], h, bias, |t, v| {
                let y = t.mul(v[0], v[1])?;
                ws(t, y)
            })
        }
        "scale" => {
            let x = uniform(rng, &[4, 3], -1.0, 1.0);
            let f = rng.random_range(-2.0..2.0);
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.scale(v[0], f)?;
                ws(t, y)
            })
        }
        "add_scalar" => {
            let x = uniform(rng, &[4, 3], -1.0, 1.0);
            let c = rng.random_range(-2.0..2.0);
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.add_scalar(v[0], c)?;
                ws(t, y)
            })
        }
        "channel_affine" => {
            let x = uniform(rng, &[2, 3, 3, 3], 0.0, 1.0);
            let scale: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..4.0)).collect();
            let shift: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.channel_affine(v[0], &scale, &shift)?;
                ws(t, y)
            })
        }
        "linear" => {
            let x = uniform(rng, &[3, 5], -1.0, 1.0);
            let w = uniform(rng, &[4, 5], -1.0, 1.0);
            let b = uniform(rng, &[4], -1.0, 1.0);
            grad_check_biased(&[x, w, b], h, bias, |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                ws(t, y)
            })
        }
        "global_avg_pool" => {
            let x = uniform(rng, &[2, 3, 3, 4], -1.0, 1.0);
            grad_check_biased(&[x], h, bias, |t, v| {
                let y = t.global_avg_pool(v[0])?;
                ws(t, y)
            })
        }
        "sum" => {
            let x = uniform(rng, &[3, 4], -1.0, 1.0);
            grad_check_biased(&[x], h, bias, |t, v| {
                let s = t.sum(v[0])?;
                // Square so the gradient depends on x.
                t.mul(s, s)
            })
        }
        "softmax_cross_entropy" => {
            let x = uniform(rng, &[4, 6], -3.0, 3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
            grad_check_biased(&[x], h, bias, |t, v| t.softmax_cross_entropy(v[0], &labels))
        }
        "spatial_attention" => {
            let f = distinct(rng, &[2, 3, 6, 6], 1e-2).map(|v| v * 3.0);
            let w = uniform(rng, &[1, 2, 7, 7], -0.5, 0.5);
            let b = uniform(rng, &[1], -0.5, 0.5);
            grad_check_biased(&[f, w, b], h, bias, |t, v| {
                let m = spatial_attention(t, v[0], v[1], v[2], 6)?;
                ws(t, m)
            })
        }
        "small_cnn_loss" => small_cnn_check(rng, h, bias),
        other => Err(crate::error::Error::InvalidArgument(format!("unknown gradcheck op {other:?}"))),
    }
}

/// Full classifier loss with respect to the input and every parameter.
///
/// ReLU, max pooling and the channel max make the loss piecewise smooth, so
/// instances whose stencil crosses a kink are redrawn.
fn small_cnn_check(rng: &mut ChaCha8Rng, h: f64, bias: f64) -> Result<f64> {
    for _ in 0..MAX_DRAWS {
        if let Some(err) = small_cnn_draw(rng, h, bias)? {
            return Ok(err);
        }
    }
    Err(crate::error::Error::InvalidArgument(format!(
        "no kink-free model instance in {MAX_DRAWS} draws at step {h:e}"
    )))
}

fn small_cnn_draw(rng: &mut ChaCha8Rng, h: f64, bias: f64) -> Result<Option<f64>> {
    let config = SmallCnnConfig {
        widths: [2, 3, 4],
        ..SmallCnnConfig::default()
    };
    let mut model = SmallCnn::<f64>::new(config.clone(), rng)?;
    // Non-zero biases so no unit sits exactly on a ReLU kink.
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with("bias") {
            let shape = p.value.shape().to_vec();
            p.value = uniform(rng, &shape, -0.2, 0.2);
        }
    }
    model.set_normalization(vec![0.5], vec![0.25])?;
    let x = uniform(rng, &[2, 1, config.image_size, config.image_size], 0.0, 1.0);
    let labels = vec![rng.random_range(0..10), rng.random_range(0..10)];

    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let template = model;
    grad_check_inner(&inputs, h, bias, true, |tape, vars| {
        let mut m = template.clone();
        for (name, &v) in names.iter().zip(&vars[1..]) {
            m.params_mut().get_mut(name).expect("known name").value = tape.value(v).clone();
        }
        forward_with_param_vars(&m, tape, vars, &labels)
    })
}

/// Runs the model so that its parameters are the given tape variables.
fn forward_with_param_vars(model: &SmallCnn<f64>, tape: &mut Tape<f64>, vars: &[Var], labels: &[usize]) -> Result<Var> {
    let pass = model.forward_on(tape, vars[0], &vars[1..], ForwardOptions::default())?;
    tape.softmax_cross_entropy(pass.logits, labels)
}

/// Runs every check for each seed and returns the worst result per op.
pub fn run_suite(seeds: std::ops::Range<u64>, h: f64, fault: Option<&Fault>) -> Result<Vec<CheckResult>> {
    SUITE
        .iter()
        .map(|&op| {
            let bias = match fault {
                Some(f) if f.op == op => f.relative_bias,
                _ => 0.0,
            };
            let mut worst = 0.0f64;
            for seed in seeds.clone() {
                worst = worst.max(check_one(op, seed, h, bias)?);
            }
            Ok(CheckResult {
                op: op.to_string(),
                max_rel_error: worst,
            })
        })
        .collect()
}

/// The result with the largest error.
pub fn worst(results: &[CheckResult]) -> Option<&CheckResult> {
    results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_one_seed() {
        for r in run_suite(0..1, DEFAULT_STEP, None).unwrap() {
            assert!(r.max_rel_error <= DEFAULT_TOLERANCE, "{r:?}");
        }
    }
}
