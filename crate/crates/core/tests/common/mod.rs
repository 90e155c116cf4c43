//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

pub mod cases;
pub mod pipeline;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tadistill_core::{Graph, Tensor, Var};

/// Step used for central differences.
pub const H: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero, so that
/// kinks at the origin are never crossed by a step of `H`.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Distinct values spaced 0.01 apart in random order, so that no max or
/// pool selection changes under a step of `H`.
pub fn tie_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Reduces `y` to a scalar as `sum(y * w)` with `w` fixed random weights,
/// so every output element contributes a distinct weight to the check.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let w = uniform(g.shape(y), -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p, None).unwrap()
}

/// Builds `f` on fresh leaves for `inputs` and returns the scalar value.
fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Largest relative error between the analytic gradient of the scalar
/// function `f` and central differences, over every coordinate of every
/// input.
pub fn max_grad_error(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    assert!(g.value(out).is_scalar(), "checked function must be scalar");
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x = input.data()[i];
            probe[k].data_mut()[i] = x + H;
            let plus = eval(&probe, f);
            probe[k].data_mut()[i] = x - H;
            let minus = eval(&probe, f);
            probe[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Step used when a kink lies within `H` of the probed point.
pub const FINE_H: f64 = 1e-6;

/// Finite-difference estimate of `d loss(x + d) / d d` at `d = 0`.
#[derive(Clone, Copy, Debug)]
pub struct Difference {
    pub value: f64,
    /// The one-sided slopes at `H` disagreed, so a ReLU or max selection
    /// switches inside the step and the value was re-measured at `FINE_H`.
    pub refined: bool,
}

/// Central difference at `H`, re-measured at `FINE_H` when the forward and
/// backward one-sided slopes disagree by more than `tol` relative.
pub fn kink_aware_difference(mut loss: impl FnMut(f64) -> f64, tol: f64) -> Difference {
    let (f0, plus, minus) = (loss(0.0), loss(H), loss(-H));
    let (fwd, bwd) = ((plus - f0) / H, (f0 - minus) / H);
    if rel_err(fwd, bwd) <= tol {
        return Difference {
            value: (plus - minus) / (2.0 * H),
            refined: false,
        };
    }
    let value = (loss(FINE_H) - loss(-FINE_H)) / (2.0 * FINE_H);
    Difference { value, refined: true }
}
