//! Property tests over the engine, losses, data pipeline and metrics.

use std::collections::HashSet;

use proptest::prelude::*;
use sha2::{Digest, Sha256};
use tadistill_core::data::{augment, denormalize, generate_dataset, normalize, AugmentParams};
use tadistill_core::losses::{kl_div, student_loss, temp_softmax, DistillConfig, SoftLabelSet};
use tadistill_core::nn::{build, forward, init_params};
use tadistill_core::train::{argmax_rows, sgd_nesterov_step, MetricsReport, OptimizerState, SgdConfig};
use tadistill_core::{Graph, ModelConfig, ParamStore, Tensor, Var};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn logits() -> impl Strategy<Value = Tensor> {
    (1usize..5, 2usize..8).prop_flat_map(|(n, k)| matrix(n, k, -20.0, 20.0))
}

fn eval_rows(t: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = f(&mut g, x);
    g.value(y).clone()
}

fn entropy_rows(p: &Tensor) -> Vec<f64> {
    let k = p.shape()[1];
    p.data()
        .chunks(k)
        .map(|row| -row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        .collect()
}

fn kl_value(p: &Tensor, q: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
    let d = kl_div(&mut g, pv, qv).unwrap();
    g.value(d).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn temp_softmax_rows_sum_to_one(x in logits(), tau in 0.05f64..50.0) {
        let p = eval_rows(&x, |g, v| temp_softmax(g, v, tau).unwrap());
        for row in p.data().chunks(x.shape()[1]) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn entropy_never_decreases_with_temperature(x in logits()) {
        let grid = [0.5, 1.0, 2.0, 4.0, 8.0];
        let entropies: Vec<Vec<f64>> = grid
            .iter()
            .map(|&tau| entropy_rows(&eval_rows(&x, |g, v| temp_softmax(g, v, tau).unwrap())))
            .collect();
        for pair in entropies.windows(2) {
            for (lo, hi) in pair[0].iter().zip(&pair[1]) {
                prop_assert!(hi + 1e-12 >= *lo, "entropy fell from {lo} to {hi}");
            }
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal_inputs(a in logits(), shift in -5.0f64..5.0) {
        let p = eval_rows(&a, |g, v| temp_softmax(g, v, 1.0).unwrap());
        let b = a.map(|v| (v * 0.37 + shift).sin() * 6.0);
        let q = eval_rows(&b, |g, v| temp_softmax(g, v, 2.0).unwrap());
        prop_assert!(kl_value(&p, &q) >= -1e-12);
        prop_assert!(kl_value(&q, &p) >= -1e-12);
        prop_assert!(kl_value(&p, &p).abs() < 1e-10);
    }

    #[test]
    fn soft_label_argmax_matches_logit_argmax(x in logits()) {
        let soft = SoftLabelSet::from_logits(&x, 1.0, 0).unwrap();
        prop_assert_eq!(argmax_rows(&soft.probs), argmax_rows(&x));
    }

    #[test]
    fn normalize_inverts_denormalize(x in matrix(3, 7, -10.0, 10.0)) {
        prop_assert!(normalize(&denormalize(&x)).max_abs_diff(&x) < 1e-12);
        prop_assert!(denormalize(&normalize(&x)).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn augmentation_keeps_shape_and_range(x in matrix(4, 16, 0.0, 1.0), seed in any::<u64>(), b in 0.0f64..0.5, c in 0.0f64..0.5) {
        let params = AugmentParams { brightness: b, contrast: c };
        let y = augment(&x, &params, seed);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(y, augment(&x, &params, seed));
    }
}

fn random_confusion() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2usize..7).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0u64..50, k), k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn accuracy_is_trace_over_total_and_weighted_recall(conf in random_confusion()) {
        let k = conf.len();
        let total: u64 = conf.iter().flatten().sum();
        prop_assume!(total > 0);
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let report = MetricsReport::from_confusion(conf.clone(), &names).unwrap();
        let trace: u64 = (0..k).map(|i| conf[i][i]).sum();
        prop_assert_eq!(report.accuracy, trace as f64 / total as f64);
        let weighted: f64 = report
            .per_class
            .iter()
            .zip(report.class_totals())
            .map(|(c, n)| c.recall * n as f64)
            .sum::<f64>()
            / total as f64;
        prop_assert!((weighted - report.accuracy).abs() < 1e-12);
        for c in &report.per_class {
            prop_assert!((0.0..=1.0).contains(&c.f_score));
        }
    }

    #[test]
    fn zero_gradient_step_without_decay_changes_nothing(w in matrix(3, 4, -3.0, 3.0), lr in 1e-4f64..1.0, mu in 0.0f64..0.99) {
        let mut store = init_params(build(&ModelConfig::student(16, 2)).unwrap(), 0);
        *store.get_mut("fc2.weight").unwrap() = Tensor::new(vec![2, 256], w.data().iter().cycle().take(512).copied().collect()).unwrap();
        let before = store.clone();
        let grads: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut state = OptimizerState::for_store(&store);
        let cfg = SgdConfig { learning_rate: lr, momentum: mu, weight_decay: 0.0 };
        sgd_nesterov_step(&mut store, &grads, &mut state, &cfg).unwrap();
        prop_assert_eq!(store, before);
    }

    #[test]
    fn tensor_file_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
        let t = Tensor::new(shape, data).unwrap();
        let back = Tensor::from_dftn_bytes(&t.to_dftn_bytes()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}

/// `sum(w1 * tanh(x)) + sum(w2 * exp(x) * x)` pieces for the linearity check.
fn two_losses(g: &mut Graph, x: Var, w1: &Tensor, w2: &Tensor) -> (Var, Var) {
    let w1 = g.constant(w1.clone());
    let w2 = g.constant(w2.clone());
    let t = g.tanh(x);
    let f = g.mul(t, w1).unwrap();
    let f = g.sum(f, None).unwrap();
    let e = g.exp(x);
    let e = g.mul(e, x).unwrap();
    let h = g.mul(e, w2).unwrap();
    let h = g.sum(h, None).unwrap();
    (f, h)
}

fn grad_of(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let root = build(&mut g, v);
    g.backward(root).unwrap().get(v).unwrap().clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn backward_is_linear(x in matrix(3, 4, -2.0, 2.0), w1 in matrix(3, 4, -1.0, 1.0), w2 in matrix(3, 4, -1.0, 1.0),
                          alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let gf = grad_of(&x, |g, v| two_losses(g, v, &w1, &w2).0);
        let gh = grad_of(&x, |g, v| two_losses(g, v, &w1, &w2).1);
        let combined = grad_of(&x, |g, v| {
            let (f, h) = two_losses(g, v, &w1, &w2);
            let f = g.scale(f, alpha);
            let h = g.scale(h, beta);
            g.add(f, h).unwrap()
        });
        for ((c, a), b) in combined.data().iter().zip(gf.data()).zip(gh.data()) {
            prop_assert!((c - (alpha * a + beta * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_gradients_match_leaf_shapes(rows in 1usize..5, cols in 1usize..5, pick in 0usize..3) {
        let rhs_shape = [vec![cols], vec![1, cols], vec![rows, 1]][pick].clone();
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[rows, cols], 1.5));
        let b = g.param(Tensor::full(&rhs_shape, 0.5));
        let y = g.mul(a, b).unwrap();
        let y = g.div(y, b).unwrap();
        let s = g.sum(y, None).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert_eq!(grads.get(a).unwrap().shape(), &[rows, cols][..]);
        prop_assert_eq!(grads.get(b).unwrap().shape(), &rhs_shape[..]);
    }
}

fn student_fixture() -> (ParamStore, Tensor, Tensor, Tensor, Tensor) {
    let cfg = ModelConfig::student(16, 3);
    let store = init_params(build(&cfg).unwrap(), 5);
    let images = Tensor::new(
        vec![2, 1, 16, 16],
        (0..512).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect(),
    )
    .unwrap();
    let soft =
        SoftLabelSet::from_logits(&Tensor::matrix(&[&[1.0, 0.0, -1.0], &[0.2, 0.3, 0.1]]).unwrap(), 4.0, 0).unwrap();
    let guide = Tensor::new(vec![2, 512], (0..1024).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
    let proj = Tensor::new(
        vec![512, 128],
        (0..65536).map(|i| (i as f64 * 0.003).cos() * 0.05).collect(),
    )
    .unwrap();
    (store, images, soft.probs, guide, proj)
}

fn student_value_and_grads(cfg: &DistillConfig) -> (u64, Vec<u64>) {
    let (store, images, soft, guide, proj) = student_fixture();
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let p = g.param(proj);
    let x = g.constant(images);
    let out = forward(&mut g, &bound, x).unwrap();
    let loss = student_loss(&mut g, &out, &[0, 2], &soft, &guide, p, cfg).unwrap();
    let value = g.value(loss).item().to_bits();
    let vars = bound.vars().to_vec();
    let grads = g.backward(loss).unwrap();
    let bits = vars
        .iter()
        .chain([&p])
        .flat_map(|&v| {
            grads
                .get(v)
                .unwrap()
                .data()
                .iter()
                .map(|d| d.to_bits())
                .collect::<Vec<_>>()
        })
        .collect();
    (value, bits)
}

#[test]
fn identical_inputs_give_bit_identical_values_and_gradients() {
    let cfg = DistillConfig::default();
    assert_eq!(student_value_and_grads(&cfg), student_value_and_grads(&cfg));
}

#[test]
fn loss_is_continuous_in_its_knobs() {
    let base = DistillConfig::default();
    let value = |cfg: &DistillConfig| f64::from_bits(student_value_and_grads(cfg).0);
    let v0 = value(&base);
    for cfg in [
        DistillConfig {
            alpha: base.alpha + 1e-6,
            ..base
        },
        DistillConfig {
            lambda_f: base.lambda_f + 1e-6,
            ..base
        },
        DistillConfig {
            tau: base.tau + 1e-6,
            ..base
        },
    ] {
        let dv = (value(&cfg) - v0).abs();
        assert!(dv < 1e-4, "knob change of 1e-6 moved the loss by {dv}");
    }
}

fn image_hashes(images: &Tensor) -> Vec<[u8; 32]> {
    let per = images.numel() / images.shape()[0];
    images
        .data()
        .chunks(per)
        .map(|img| {
            let mut h = Sha256::new();
            for v in img {
                h.update(v.to_le_bytes());
            }
            h.finalize().into()
        })
        .collect()
}

#[test]
fn generated_splits_are_disjoint_balanced_and_reproducible() {
    for seed in [0, 1, 2] {
        let (train, test) = generate_dataset(4, 30, 10, 32, seed).unwrap();
        assert_eq!(train.class_counts(), vec![30; 4]);
        assert_eq!(test.class_counts(), vec![10; 4]);
        let train_hashes: HashSet<_> = image_hashes(&train.images).into_iter().collect();
        assert_eq!(train_hashes.len(), train.len(), "duplicate image inside train");
        assert!(image_hashes(&test.images).iter().all(|h| !train_hashes.contains(h)));

        let (again, _) = generate_dataset(4, 30, 10, 32, seed).unwrap();
        assert_eq!(again.images, train.images);
        assert_eq!(again.labels, train.labels);
    }
}
