//! Every differentiable operation, layer and loss as a scalar test function.

use rand_chacha::ChaCha8Rng;
use tadistill_core::losses::{cross_entropy, feature_term, kl_div, softmax, temp_softmax, FeatureLoss};
use tadistill_core::nn::layers::{bilstm_layer, conv_block, linear, lstm_direction, LstmWeights};
use tadistill_core::nn::models::{columns_to_sequence, global_avg_pool};
use tadistill_core::{Graph, Tensor, Var};

use super::{away_from_zero, rng, tie_free, uniform, weighted_sum};

pub type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
pub type BuildFn = Box<dyn Fn(&mut Graph, &[Var], u64) -> Var>;

pub struct OpCase {
    pub name: String,
    /// Elementwise kinds are held to the tighter tolerance.
    pub elementwise: bool,
    pub inputs: InputFn,
    /// Builds a scalar from the input leaves; the `u64` seeds output weights.
    pub build: BuildFn,
}

fn case(
    name: impl Into<String>,
    elementwise: bool,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[Var], u64) -> Var + 'static,
) -> OpCase {
    OpCase {
        name: name.into(),
        elementwise,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

/// `sum(w * op(inputs))` for an op with a tensor output.
fn reduced(op: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> impl Fn(&mut Graph, &[Var], u64) -> Var {
    move |g, v, seed| {
        let y = op(g, v);
        weighted_sum(g, y, seed)
    }
}

fn u(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![uniform(shape, -1.0, 1.0, r)]
}

fn distribution_logits(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![uniform(&[3, 5], -2.0, 2.0, r), uniform(&[3, 5], -2.0, 2.0, r)]
}

fn lstm_inputs(r: &mut ChaCha8Rng, steps: usize, directions: usize) -> Vec<Tensor> {
    let mut all: Vec<Tensor> = (0..steps).map(|_| uniform(&[2, 3], -1.0, 1.0, r)).collect();
    for _ in 0..directions {
        all.push(uniform(&[8, 3], -0.5, 0.5, r));
        all.push(uniform(&[8, 2], -0.5, 0.5, r));
        all.push(uniform(&[8], -0.5, 0.5, r));
    }
    all
}

pub fn catalogue() -> Vec<OpCase> {
    let mut cases = Vec::new();

    for rhs in [&[3usize, 4][..], &[4], &[1, 4], &[3, 1]] {
        let inputs = move |r: &mut ChaCha8Rng| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(rhs, 0.5, 1.5, r)];
        cases.push(case(
            format!("add {rhs:?}"),
            true,
            inputs,
            reduced(|g, v| g.add(v[0], v[1]).unwrap()),
        ));
        cases.push(case(
            format!("sub {rhs:?}"),
            true,
            inputs,
            reduced(|g, v| g.sub(v[0], v[1]).unwrap()),
        ));
        cases.push(case(
            format!("mul {rhs:?}"),
            true,
            inputs,
            reduced(|g, v| g.mul(v[0], v[1]).unwrap()),
        ));
        cases.push(case(
            format!("div {rhs:?}"),
            true,
            inputs,
            reduced(|g, v| g.div(v[0], v[1]).unwrap()),
        ));
    }
    let signed = |r: &mut ChaCha8Rng| vec![away_from_zero(&[3, 4], 0.01, r)];
    cases.push(case("relu", true, signed, reduced(|g, v| g.relu(v[0]))));
    cases.push(case("exp", true, signed, reduced(|g, v| g.exp(v[0]))));
    cases.push(case("tanh", true, signed, reduced(|g, v| g.tanh(v[0]))));
    cases.push(case("sigmoid", true, signed, reduced(|g, v| g.sigmoid(v[0]))));
    cases.push(case("scale", true, signed, reduced(|g, v| g.scale(v[0], -2.5))));
    cases.push(case(
        "add_scalar",
        true,
        signed,
        reduced(|g, v| g.add_scalar(v[0], 0.75)),
    ));
    cases.push(case(
        "log",
        true,
        |r| vec![uniform(&[3, 4], 0.2, 2.0, r)],
        reduced(|g, v| g.log(v[0])),
    ));

    cases.push(case(
        "matmul",
        false,
        |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 2], -1.0, 1.0, r)],
        reduced(|g, v| g.matmul(v[0], v[1]).unwrap()),
    ));
    cases.push(case(
        "matmul_t",
        false,
        |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[5, 4], -1.0, 1.0, r)],
        reduced(|g, v| g.matmul_t(v[0], v[1]).unwrap()),
    ));
    cases.push(case(
        "conv2d",
        false,
        |r| {
            vec![
                uniform(&[2, 2, 5, 5], -1.0, 1.0, r),
                uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
                uniform(&[3], -1.0, 1.0, r),
            ]
        },
        reduced(|g, v| g.conv2d(v[0], v[1], v[2]).unwrap()),
    ));
    cases.push(case(
        "maxpool2d",
        false,
        |r| vec![tie_free(&[2, 2, 4, 6], r)],
        reduced(|g, v| g.maxpool2d(v[0]).unwrap()),
    ));

    for axis in [None, Some(0), Some(1), Some(2)] {
        cases.push(case(
            format!("sum {axis:?}"),
            false,
            u(&[2, 3, 4]),
            reduced(move |g, v| g.sum(v[0], axis).unwrap()),
        ));
        cases.push(case(
            format!("mean {axis:?}"),
            false,
            u(&[2, 3, 4]),
            reduced(move |g, v| g.mean(v[0], axis).unwrap()),
        ));
        cases.push(case(
            format!("max {axis:?}"),
            false,
            |r| vec![tie_free(&[2, 3, 4], r)],
            reduced(move |g, v| g.max(v[0], axis).unwrap()),
        ));
    }

    cases.push(case(
        "reshape",
        false,
        u(&[2, 3, 4]),
        reduced(|g, v| g.reshape(v[0], &[6, 4]).unwrap()),
    ));
    cases.push(case(
        "permute",
        false,
        u(&[2, 3, 4]),
        reduced(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()),
    ));
    cases.push(case(
        "transpose",
        false,
        u(&[3, 5]),
        reduced(|g, v| g.transpose(v[0]).unwrap()),
    ));
    cases.push(case(
        "narrow",
        false,
        u(&[2, 3, 4]),
        reduced(|g, v| g.narrow(v[0], 2, 1, 2).unwrap()),
    ));
    cases.push(case(
        "concat",
        false,
        |r| vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 5], -1.0, 1.0, r)],
        reduced(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
    ));

    cases.push(case(
        "linear",
        false,
        |r| {
            vec![
                uniform(&[3, 4], -1.0, 1.0, r),
                uniform(&[2, 4], -1.0, 1.0, r),
                uniform(&[2], -1.0, 1.0, r),
            ]
        },
        reduced(|g, v| linear(g, v[0], v[1], v[2]).unwrap()),
    ));
    cases.push(case(
        "conv_block",
        false,
        |r| {
            vec![
                uniform(&[1, 2, 4, 4], -1.0, 1.0, r),
                uniform(&[2, 2, 3, 3], -1.0, 1.0, r),
                uniform(&[2], -0.1, 0.1, r),
            ]
        },
        reduced(|g, v| conv_block(g, v[0], v[1], v[2], true).unwrap()),
    ));
    for reverse in [false, true] {
        cases.push(case(
            format!("lstm_direction reverse={reverse}"),
            false,
            |r| lstm_inputs(r, 3, 1),
            reduced(move |g, v| {
                let w = LstmWeights {
                    w_ih: v[3],
                    w_hh: v[4],
                    bias: v[5],
                };
                let hs = lstm_direction(g, &v[..3], &w, 2, reverse).unwrap();
                g.concat(&hs, 1).unwrap()
            }),
        ));
    }
    cases.push(case(
        "bilstm_layer",
        false,
        |r| lstm_inputs(r, 2, 2),
        reduced(|g, v| {
            let fw = LstmWeights {
                w_ih: v[2],
                w_hh: v[3],
                bias: v[4],
            };
            let bw = LstmWeights {
                w_ih: v[5],
                w_hh: v[6],
                bias: v[7],
            };
            let hs = bilstm_layer(g, &v[..2], &fw, &bw, 2).unwrap();
            g.concat(&hs, 1).unwrap()
        }),
    ));
    cases.push(case(
        "columns_to_sequence",
        false,
        u(&[2, 3, 2, 4]),
        reduced(|g, v| {
            let cols = columns_to_sequence(g, v[0]).unwrap();
            g.concat(&cols, 1).unwrap()
        }),
    ));
    cases.push(case(
        "global_avg_pool",
        false,
        u(&[2, 3, 2, 4]),
        reduced(|g, v| global_avg_pool(g, v[0]).unwrap()),
    ));

    let logits = |r: &mut ChaCha8Rng| vec![uniform(&[3, 5], -3.0, 3.0, r)];
    cases.push(case(
        "temp_softmax",
        false,
        logits,
        reduced(|g, v| temp_softmax(g, v[0], 2.5).unwrap()),
    ));
    cases.push(case(
        "softmax",
        false,
        logits,
        reduced(|g, v| softmax(g, v[0]).unwrap()),
    ));
    cases.push(case("kl_div", false, distribution_logits, |g, v, _| {
        let p = softmax(g, v[0]).unwrap();
        let q = softmax(g, v[1]).unwrap();
        kl_div(g, p, q).unwrap()
    }));
    cases.push(case("cross_entropy", false, logits, |g, v, _| {
        cross_entropy(g, v[0], &[4, 0, 2]).unwrap()
    }));
    for kind in [FeatureLoss::KlSoftmax, FeatureLoss::Mse] {
        cases.push(case(
            format!("feature_term {}", kind.name()),
            false,
            |r| vec![uniform(&[2, 6], -2.0, 2.0, r)],
            move |g, v, seed| {
                let target = uniform(&[2, 6], -2.0, 2.0, &mut rng(seed ^ 0xfea7));
                feature_term(g, v[0], &target, kind).unwrap()
            },
        ));
    }
    cases
}

/// Worst relative error of `case` over `trials` seeded inputs.
pub fn worst_error(case: &OpCase, trials: u64) -> f64 {
    (0..trials)
        .map(|seed| {
            let inputs = (case.inputs)(&mut rng(seed));
            super::max_grad_error(&inputs, &|g, v| (case.build)(g, v, seed))
        })
        .fold(0.0, f64::max)
}
