//! The composed student graph (forward plus distillation loss) on a fixed
//! two-sample 32x32 batch, checked coordinate by coordinate.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use tadistill_core::losses::{student_loss, DistillConfig};
use tadistill_core::nn::{build, feature_dim, forward, init_params};
use tadistill_core::{Graph, ModelConfig, ParamStore, Tensor, Var};

use super::{kink_aware_difference, rel_err, rng, uniform};

pub const PIPELINE_TOL: f64 = 1e-3;

pub fn distribution(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let raw = uniform(&[rows, cols], 0.05, 1.0, r);
    let mut data = raw.into_data();
    for row in data.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub struct Pipeline {
    pub store: ParamStore,
    pub projection: Tensor,
    images: Tensor,
    labels: Vec<usize>,
    soft: Tensor,
    guide: Tensor,
    cfg: DistillConfig,
}

impl Pipeline {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let model = ModelConfig::student(32, 4);
        let store = init_params(build(&model).unwrap(), seed);
        Pipeline {
            store,
            projection: uniform(&[512, feature_dim(&model)], -0.05, 0.05, &mut r),
            images: uniform(&[2, 1, 32, 32], -1.0, 1.0, &mut r),
            labels: vec![1, 3],
            soft: distribution(2, 4, &mut r),
            guide: uniform(&[2, 512], -1.0, 1.0, &mut r),
            cfg: DistillConfig::default(),
        }
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        projection: &Tensor,
        trainable: bool,
    ) -> (Var, Vec<Var>, Var) {
        let bound = store.bind(g, trainable);
        let proj = g.leaf(projection.clone(), trainable);
        let x = g.constant(self.images.clone());
        let out = forward(g, &bound, x).unwrap();
        let loss = student_loss(g, &out, &self.labels, &self.soft, &self.guide, proj, &self.cfg).unwrap();
        (loss, bound.vars().to_vec(), proj)
    }

    pub fn loss(&self, store: &ParamStore, projection: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (loss, _, _) = self.build_loss(&mut g, store, projection, false);
        g.value(loss).item()
    }

    /// Analytic gradients in store order, then the projection gradient.
    pub fn gradients(&self) -> Vec<Tensor> {
        let mut g = Graph::new();
        let (loss, vars, proj) = self.build_loss(&mut g, &self.store, &self.projection, true);
        let mut grads = g.backward(loss).unwrap();
        let mut out: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
        out.push(grads.take(proj).unwrap());
        out
    }

    /// Entry names matching [`Pipeline::gradients`].
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.store.names().map(str::to_owned).collect();
        names.push("projection".into());
        names
    }
}

/// The `top` largest analytic gradients plus `random` uniformly drawn positions.
pub fn sample_indices(grad: &Tensor, top: usize, random: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.numel()).collect();
    order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
    let mut picked: Vec<usize> = order.into_iter().take(top).collect();
    let mut r = rng(seed);
    picked.extend((0..random).map(|_| r.random_range(0..grad.numel())));
    picked.sort_unstable();
    picked.dedup();
    picked
}

pub struct CoordinateCheck {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
    /// Coordinates re-measured at the fine step because of a nearby kink.
    pub refined: usize,
}

/// Sampled coordinates of every parameter tensor and of the projection.
pub fn check_coordinates(p: &Pipeline) -> CoordinateCheck {
    let analytic = p.gradients();
    let names = p.names();
    let mut result = CoordinateCheck {
        worst: 0.0,
        worst_at: String::new(),
        checked: 0,
        refined: 0,
    };
    for (k, (grad, name)) in analytic.iter().zip(&names).enumerate() {
        let is_projection = k + 1 == names.len();
        for i in sample_indices(grad, 8, 16, k as u64) {
            let diff = kink_aware_difference(
                |d| {
                    let (mut store, mut proj) = (p.store.clone(), p.projection.clone());
                    let t = if is_projection {
                        &mut proj
                    } else {
                        store.get_mut(name).unwrap()
                    };
                    t.data_mut()[i] += d;
                    p.loss(&store, &proj)
                },
                PIPELINE_TOL,
            );
            result.checked += 1;
            result.refined += usize::from(diff.refined);
            let err = rel_err(grad.data()[i], diff.value);
            if err > result.worst {
                result.worst = err;
                result.worst_at = format!("{name}[{i}]");
            }
        }
    }
    result
}

/// Relative error of the directional derivative along `directions` random
/// sign vectors spanning every parameter at once.
pub fn check_directions(p: &Pipeline, directions: usize, seed: u64) -> f64 {
    let analytic = p.gradients();
    let mut r = rng(seed);
    let step = super::H * 1e-2;
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dirs: Vec<Vec<f64>> = analytic
            .iter()
            .map(|t| {
                (0..t.numel())
                    .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let predicted: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |sign: f64| {
            let mut store = p.store.clone();
            let mut proj = p.projection.clone();
            let targets = store.iter_mut().map(|(_, t)| t).chain([&mut proj]);
            for (t, d) in targets.zip(&dirs) {
                for (v, dv) in t.data_mut().iter_mut().zip(d) {
                    *v += sign * step * dv;
                }
            }
            p.loss(&store, &proj)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
        worst = worst.max(rel_err(predicted, numeric));
    }
    worst
}
