//! The three architectures.
//!
//! * student: four conv(3x3)+ReLU+pool blocks with 32, 64, 128, 128 filters,
//!   then fc1 (ReLU) and fc2. Its distillation feature is the flattened
//!   output of the fourth block.
//! * assistant: four conv+pool blocks with 64, 128, 256, 300 filters; each
//!   column of the final feature map becomes one timestep of a two-layer
//!   bidirectional recurrent stack (256 units per direction); the
//!   concatenated top-layer state at the last timestep (512 values) is its
//!   feature, followed by fc1 (ReLU) and fc2.
//! * teacher: `teacher_depth` conv+ReLU blocks with `64 * 2^(i/2)` filters
//!   (block `i` counted from 1, capped at 512), a pool after every second
//!   block up to four pools, global average pooling (the feature) and one
//!   linear head.

use indexmap::IndexMap;
use rand::RngExt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

use super::layers::{bilstm_layer, conv_block, linear, LstmWeights};
use super::params::{Bound, ModelConfig, ModelKind, ParamStore, MIN_TEACHER_DEPTH};

pub const STUDENT_CHANNELS: [usize; 4] = [32, 64, 128, 128];
pub const ASSISTANT_CHANNELS: [usize; 4] = [64, 128, 256, 300];
pub const LSTM_HIDDEN: usize = 256;
pub const LSTM_LAYERS: usize = 2;
/// Width of the assistant feature (both directions of the top layer).
pub const ASSISTANT_FEATURE_DIM: usize = 2 * LSTM_HIDDEN;
const TEACHER_MAX_CHANNELS: usize = 512;
const TEACHER_MAX_POOLS: usize = 4;

/// Logits and distillation feature of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[N, num_classes]`
    pub logits: Var,
    /// `[N, feature_dim]`
    pub feature: Var,
}

pub fn teacher_channels(block: usize) -> usize {
    (64usize << (block / 2)).min(TEACHER_MAX_CHANNELS)
}

fn teacher_pools_after(block: usize) -> bool {
    block.is_multiple_of(2) && block / 2 <= TEACHER_MAX_POOLS
}

/// Width of the distillation feature vector produced by a model.
pub fn feature_dim(cfg: &ModelConfig) -> usize {
    match cfg.kind {
        ModelKind::Student => {
            let side = cfg.input_size / 16;
            STUDENT_CHANNELS[3] * side * side
        }
        ModelKind::Assistant => ASSISTANT_FEATURE_DIM,
        ModelKind::Teacher => teacher_channels(cfg.teacher_depth),
    }
}

fn conv_shapes(out: &mut Vec<(String, Vec<usize>)>, index: usize, c_in: usize, c_out: usize) {
    out.push((format!("conv{index}.weight"), vec![c_out, c_in, 3, 3]));
    out.push((format!("conv{index}.bias"), vec![c_out]));
}

/// Parameter names and shapes, in store order, for a configuration.
pub fn param_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let side = cfg.input_size / 16;
    let mut out = Vec::new();
    match cfg.kind {
        ModelKind::Student => {
            let mut c_in = cfg.in_channels;
            for (i, &c) in STUDENT_CHANNELS.iter().enumerate() {
                conv_shapes(&mut out, i + 1, c_in, c);
                c_in = c;
            }
            out.push(("fc1.weight".into(), vec![cfg.hidden_fc, c_in * side * side]));
            out.push(("fc1.bias".into(), vec![cfg.hidden_fc]));
            out.push(("fc2.weight".into(), vec![cfg.num_classes, cfg.hidden_fc]));
            out.push(("fc2.bias".into(), vec![cfg.num_classes]));
        }
        ModelKind::Assistant => {
            let mut c_in = cfg.in_channels;
            for (i, &c) in ASSISTANT_CHANNELS.iter().enumerate() {
                conv_shapes(&mut out, i + 1, c_in, c);
                c_in = c;
            }
            let mut input_dim = c_in * side;
            for layer in 0..LSTM_LAYERS {
                for dir in ["fwd", "bwd"] {
                    let p = format!("lstm.l{layer}.{dir}");
                    out.push((format!("{p}.w_ih"), vec![4 * LSTM_HIDDEN, input_dim]));
                    out.push((format!("{p}.w_hh"), vec![4 * LSTM_HIDDEN, LSTM_HIDDEN]));
                    out.push((format!("{p}.bias"), vec![4 * LSTM_HIDDEN]));
                }
                input_dim = 2 * LSTM_HIDDEN;
            }
            out.push(("fc1.weight".into(), vec![cfg.hidden_fc, ASSISTANT_FEATURE_DIM]));
            out.push(("fc1.bias".into(), vec![cfg.hidden_fc]));
            out.push(("fc2.weight".into(), vec![cfg.num_classes, cfg.hidden_fc]));
            out.push(("fc2.bias".into(), vec![cfg.num_classes]));
        }
        ModelKind::Teacher => {
            if cfg.teacher_depth < MIN_TEACHER_DEPTH {
                return Err(Error::contract(format!(
                    "teacher_depth must be at least {MIN_TEACHER_DEPTH}, got {}",
                    cfg.teacher_depth
                )));
            }
            let mut c_in = cfg.in_channels;
            for block in 1..=cfg.teacher_depth {
                let c = teacher_channels(block);
                conv_shapes(&mut out, block, c_in, c);
                c_in = c;
            }
            out.push(("head.weight".into(), vec![cfg.num_classes, c_in]));
            out.push(("head.bias".into(), vec![cfg.num_classes]));
        }
    }
    Ok(out)
}

/// Parameter count from shape arithmetic alone.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_shapes(cfg)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Smallest teacher depth whose parameter count exceeds the assistant's for
/// the same input size, class count and channel count.
pub fn min_teacher_depth(cfg: &ModelConfig) -> Result<usize> {
    let assistant = count_params(&ModelConfig {
        kind: ModelKind::Assistant,
        ..*cfg
    })?;
    (MIN_TEACHER_DEPTH..=256)
        .find(|&d| {
            count_params(&ModelConfig {
                kind: ModelKind::Teacher,
                teacher_depth: d,
                ..*cfg
            })
            .is_ok_and(|n| n > assistant)
        })
        .ok_or_else(|| Error::contract("no teacher depth exceeds the assistant size"))
}

fn zero_store(cfg: &ModelConfig) -> Result<ParamStore> {
    let entries: IndexMap<String, Tensor> = param_shapes(cfg)?
        .into_iter()
        .map(|(n, s)| {
            let t = Tensor::zeros(&s);
            (n, t)
        })
        .collect();
    Ok(ParamStore::from_entries(*cfg, entries))
}

fn require_kind(cfg: &ModelConfig, kind: ModelKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::contract(format!(
            "expected a {kind} configuration, got {}",
            cfg.kind
        )));
    }
    Ok(())
}

/// Zero-initialized student parameters; see [`init_params`].
pub fn build_student(cfg: &ModelConfig) -> Result<ParamStore> {
    require_kind(cfg, ModelKind::Student)?;
    zero_store(cfg)
}

pub fn build_assistant(cfg: &ModelConfig) -> Result<ParamStore> {
    require_kind(cfg, ModelKind::Assistant)?;
    zero_store(cfg)
}

/// Builds the teacher after checking it is strictly larger than the
/// assistant at the same input size.
pub fn build_teacher(cfg: &ModelConfig) -> Result<ParamStore> {
    require_kind(cfg, ModelKind::Teacher)?;
    let teacher = count_params(cfg)?;
    let assistant = count_params(&ModelConfig {
        kind: ModelKind::Assistant,
        ..*cfg
    })?;
    if teacher <= assistant {
        let min = min_teacher_depth(cfg)?;
        return Err(Error::contract(format!(
            "teacher_depth {} gives {teacher} parameters, not more than the assistant's {assistant}; \
             use teacher_depth >= {min}",
            cfg.teacher_depth
        )));
    }
    zero_store(cfg)
}

pub fn build(cfg: &ModelConfig) -> Result<ParamStore> {
    match cfg.kind {
        ModelKind::Student => build_student(cfg),
        ModelKind::Assistant => build_assistant(cfg),
        ModelKind::Teacher => build_teacher(cfg),
    }
}

/// Glorot-uniform weights, zero biases, recurrent forget-gate biases 1.0.
/// Each entry draws from its own stream, so the result depends only on the
/// seed and the entry position.
pub fn init_params(mut store: ParamStore, seed: u64) -> ParamStore {
    for (idx, (name, t)) in store.iter_mut().enumerate() {
        let shape = t.shape().to_vec();
        if name.ends_with(".bias") {
            t.data_mut().fill(0.0);
            if name.starts_with("lstm.") {
                let h = shape[0] / 4;
                t.data_mut()[h..2 * h].fill(1.0);
            }
            continue;
        }
        let receptive: usize = shape[2..].iter().product();
        let fan_in = shape[1] * receptive;
        let fan_out = shape[0] * receptive;
        init_glorot(t, fan_in, fan_out, seed, idx as u64);
    }
    store
}

pub(crate) fn init_glorot(t: &mut Tensor, fan_in: usize, fan_out: usize, seed: u64, stream: u64) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng::stream(seed, Domain::Init, stream);
    for v in t.data_mut() {
        *v = rng.random_range(-a..a);
    }
}

fn check_input(g: &Graph, cfg: &ModelConfig, batch: Var) -> Result<()> {
    let shape = g.shape(batch);
    let ok = matches!(*shape, [_, c, h, w] if c == cfg.in_channels && h == cfg.input_size && w == cfg.input_size);
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: shape.to_vec(),
            rhs: vec![0, cfg.in_channels, cfg.input_size, cfg.input_size],
        });
    }
    Ok(())
}

/// Forward pass of any model kind on a `[N, C, H, W]` batch.
pub fn forward(g: &mut Graph, params: &Bound<'_>, batch: Var) -> Result<ForwardOutput> {
    let cfg = *params.config();
    check_input(g, &cfg, batch)?;
    match cfg.kind {
        ModelKind::Student => student_forward(g, params, batch),
        ModelKind::Assistant => assistant_forward(g, params, batch),
        ModelKind::Teacher => teacher_forward(g, params, batch),
    }
}

fn conv_stack(g: &mut Graph, p: &Bound<'_>, mut x: Var, blocks: usize, pool: impl Fn(usize) -> bool) -> Result<Var> {
    for i in 1..=blocks {
        x = conv_block(
            g,
            x,
            p.get(&format!("conv{i}.weight")),
            p.get(&format!("conv{i}.bias")),
            pool(i),
        )?;
    }
    Ok(x)
}

fn classifier(g: &mut Graph, p: &Bound<'_>, feature: Var) -> Result<Var> {
    let h = linear(g, feature, p.get("fc1.weight"), p.get("fc1.bias"))?;
    let h = g.relu(h);
    linear(g, h, p.get("fc2.weight"), p.get("fc2.bias"))
}

fn student_forward(g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<ForwardOutput> {
    let n = g.shape(x)[0];
    let maps = conv_stack(g, p, x, 4, |_| true)?;
    let feature = g.reshape(maps, &[n, feature_dim(p.config())])?;
    let logits = classifier(g, p, feature)?;
    Ok(ForwardOutput { logits, feature })
}

/// `[N, C, H, W]` feature map to `W` timesteps of `[N, C * H]`.
pub fn columns_to_sequence(g: &mut Graph, maps: Var) -> Result<Vec<Var>> {
    let [n, c, h, w] = *g.shape(maps) else {
        return Err(Error::contract("columns_to_sequence expects a rank-4 feature map"));
    };
    let cols = g.permute(maps, &[3, 0, 1, 2])?;
    (0..w)
        .map(|t| {
            let step = g.narrow(cols, 0, t, 1)?;
            g.reshape(step, &[n, c * h])
        })
        .collect()
}

fn lstm_weights(p: &Bound<'_>, layer: usize, dir: &str) -> LstmWeights {
    let prefix = format!("lstm.l{layer}.{dir}");
    LstmWeights {
        w_ih: p.get(&format!("{prefix}.w_ih")),
        w_hh: p.get(&format!("{prefix}.w_hh")),
        bias: p.get(&format!("{prefix}.bias")),
    }
}

fn assistant_forward(g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<ForwardOutput> {
    let maps = conv_stack(g, p, x, 4, |_| true)?;
    let mut seq = columns_to_sequence(g, maps)?;
    for layer in 0..LSTM_LAYERS {
        let fw = lstm_weights(p, layer, "fwd");
        let bw = lstm_weights(p, layer, "bwd");
        seq = bilstm_layer(g, &seq, &fw, &bw, LSTM_HIDDEN)?;
    }
    let feature = *seq.last().expect("non-empty sequence");
    let logits = classifier(g, p, feature)?;
    Ok(ForwardOutput { logits, feature })
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(g: &mut Graph, maps: Var) -> Result<Var> {
    let [n, c, h, w] = *g.shape(maps) else {
        return Err(Error::contract("global_avg_pool expects a rank-4 input"));
    };
    let flat = g.reshape(maps, &[n, c, h * w])?;
    g.mean(flat, Some(2))
}

fn teacher_forward(g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<ForwardOutput> {
    let depth = p.config().teacher_depth;
    let maps = conv_stack(g, p, x, depth, teacher_pools_after)?;
    let feature = global_avg_pool(g, maps)?;
    let logits = linear(g, feature, p.get("head.weight"), p.get("head.bias"))?;
    Ok(ForwardOutput { logits, feature })
}

/// Plain values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub features: Tensor,
}

impl ParamStore {
    /// Gradient-free forward over `images` (`[M, C, H, W]`) in chunks of
    /// `batch_size`, returning logits `[M, K]` and features `[M, D]`.
    pub fn predict(&self, images: &Tensor, batch_size: usize) -> Result<Prediction> {
        let m = *images
            .shape()
            .first()
            .ok_or_else(|| Error::contract("predict on a scalar"))?;
        let batch_size = batch_size.max(1);
        let mut logits = Vec::new();
        let mut features = Vec::new();
        let mut start = 0;
        while start < m {
            let len = batch_size.min(m - start);
            let chunk = images.slice_rows(start, len)?;
            let mut g = Graph::new();
            let params = self.bind(&mut g, false);
            let x = g.constant(chunk);
            let out = forward(&mut g, &params, x)?;
            logits.push(g.value(out.logits).clone());
            features.push(g.value(out.feature).clone());
            start += len;
        }
        Ok(Prediction {
            logits: Tensor::concat_rows(&logits)?,
            features: Tensor::concat_rows(&features)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn student_shapes() {
        let mut cfg = ModelConfig::student(64, 10);
        cfg.hidden_fc = 256;
        let store = build_student(&cfg).unwrap();
        assert_eq!(store.get("fc1.weight").unwrap().shape(), &[256, 2048]);
        assert_eq!(store.get("conv1.weight").unwrap().shape(), &[32, 1, 3, 3]);
        assert_eq!(feature_dim(&cfg), 2048);
    }

    #[test]
    fn assistant_shapes() {
        let cfg = ModelConfig::assistant(64, 10);
        let store = build_assistant(&cfg).unwrap();
        assert_eq!(store.get("lstm.l0.fwd.w_ih").unwrap().shape(), &[1024, 1200]);
        assert_eq!(store.get("lstm.l0.bwd.w_hh").unwrap().shape(), &[1024, 256]);
        assert_eq!(store.get("lstm.l1.fwd.w_ih").unwrap().shape(), &[1024, 512]);
        assert_eq!(store.get("lstm.l1.bwd.bias").unwrap().shape(), &[1024]);
        assert_eq!(feature_dim(&cfg), 512);
    }

    #[test]
    fn teacher_channel_schedule() {
        let chans: Vec<usize> = (1..=10).map(teacher_channels).collect();
        assert_eq!(chans, vec![64, 128, 128, 256, 256, 512, 512, 512, 512, 512]);
        let pools: Vec<usize> = (1..=10).filter(|&b| teacher_pools_after(b)).collect();
        assert_eq!(pools, vec![2, 4, 6, 8]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(build_student(&ModelConfig::student(60, 10)).is_err());
        assert!(build_student(&ModelConfig::student(64, 1)).is_err());
        assert!(build_student(&ModelConfig::assistant(64, 10)).is_err());
        let mut t = ModelConfig::teacher(64, 10);
        t.teacher_depth = 5;
        assert!(build_teacher(&t).is_err());
        t.teacher_depth = 7;
        let msg = build_teacher(&t).unwrap_err().to_string();
        assert!(msg.contains("teacher_depth >= 8"), "{msg}");
    }

    #[test]
    fn linear_param_count() {
        let mut cfg = ModelConfig::student(16, 2);
        cfg.hidden_fc = 3;
        let s = build_student(&cfg).unwrap();
        let fc2 = s.get("fc2.weight").unwrap().numel() + s.get("fc2.bias").unwrap().numel();
        assert_eq!(fc2, 8);
    }

    #[test]
    fn init_rules() {
        let cfg = ModelConfig::assistant(16, 3);
        let a = init_params(build_assistant(&cfg).unwrap(), 7);
        let b = init_params(build_assistant(&cfg).unwrap(), 7);
        let c = init_params(build_assistant(&cfg).unwrap(), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bias = a.get("lstm.l0.fwd.bias").unwrap().data();
        assert!(bias[..256].iter().all(|&v| v == 0.0));
        assert!(bias[256..512].iter().all(|&v| v == 1.0));
        assert!(bias[512..].iter().all(|&v| v == 0.0));
        assert!(a.get("conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
