//! Distillation loss algebra.
//!
//! With `P^tau = softmax(logits / tau)`:
//!
//! * assistant: `(1 - alpha) * CE(P_A, y) + alpha * tau^2 * KL(P_T^tau || P_A^tau)`
//! * student: the same two terms with the guide (assistant or teacher) as
//!   the soft-label source, plus `lambda_f * L_feat(guide feature, projected
//!   student feature)`.
//!
//! KL is averaged over the batch. The feature term is either KL between the
//! two softmax-normalized feature vectors or their mean squared error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ForwardOutput, ParamStore};
use crate::tensor::{read_exact, read_f64, read_u16, read_u64, Tensor};

pub const DFSL_MAGIC: &[u8; 4] = b"DFSL";
pub const DFSL_VERSION: u16 = 1;

/// Row sums of probability inputs to [`kl_div`] must be within this of 1.
pub const PROB_ROW_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLoss {
    KlSoftmax,
    Mse,
}

impl FeatureLoss {
    pub fn name(self) -> &'static str {
        match self {
            FeatureLoss::KlSoftmax => "kl_softmax",
            FeatureLoss::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kl_softmax" => Some(FeatureLoss::KlSoftmax),
            "mse" => Some(FeatureLoss::Mse),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub tau: f64,
    pub alpha: f64,
    pub lambda_f: f64,
    pub feature_loss: FeatureLoss,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 4.0,
            alpha: 0.4,
            lambda_f: 0.4,
            feature_loss: FeatureLoss::KlSoftmax,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda_f >= 0.0 && self.lambda_f.is_finite()) {
            return Err(Error::contract(format!(
                "lambda_f must be non-negative, got {}",
                self.lambda_f
            )));
        }
        Ok(())
    }
}

fn row_dims(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [n, k] => Ok((n, k)),
        _ => Err(Error::contract(format!("{op} expects [N, K], got {:?}", g.shape(v)))),
    }
}

/// Row-wise `softmax(logits / tau)`, stabilized by subtracting the row max.
pub fn temp_softmax(g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let (n, _) = row_dims(g, logits, "temp_softmax")?;
    let z = if tau == 1.0 { logits } else { g.scale(logits, 1.0 / tau) };
    let m = g.max(z, Some(1))?;
    let m = g.detach(m);
    let m = g.reshape(m, &[n, 1])?;
    let shifted = g.sub(z, m)?;
    let e = g.exp(shifted);
    let s = g.sum(e, Some(1))?;
    let s = g.reshape(s, &[n, 1])?;
    g.div(e, s)
}

pub fn softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    temp_softmax(g, logits, 1.0)
}

fn check_distribution(t: &Tensor, name: &str) -> Result<()> {
    let k = t.shape()[1];
    for (row, chunk) in t.data().chunks_exact(k).enumerate() {
        let sum: f64 = chunk.iter().sum();
        if chunk.iter().any(|&x| x.is_nan() || x < 0.0) || (sum - 1.0).abs() > PROB_ROW_TOLERANCE {
            return Err(Error::contract(format!(
                "kl_div: row {row} of {name} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// `mean_rows( sum_k p log(p / q) )`. `q` is clamped to 1e-12 inside the
/// log, and `p = 0` terms contribute nothing.
pub fn kl_div(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (n, k) = row_dims(g, p, "kl_div")?;
    if g.shape(q) != [n, k] {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            lhs: vec![n, k],
            rhs: g.shape(q).to_vec(),
        });
    }
    check_distribution(g.value(p), "p")?;
    check_distribution(g.value(q), "q")?;
    let lp = g.log(p);
    let lq = g.log(q);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms, None)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!("label {y} out of range for {k} classes")));
        }
        data[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Mean of `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = row_dims(g, logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::contract(format!(
            "cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    let targets = g.constant(one_hot(labels, k)?);
    let m = g.max(logits, Some(1))?;
    let m = g.detach(m);
    let m = g.reshape(m, &[n, 1])?;
    let shifted = g.sub(logits, m)?;
    let e = g.exp(shifted);
    let s = g.sum(e, Some(1))?;
    let lse = g.log(s);
    let picked = g.mul(shifted, targets)?;
    let picked = g.sum(picked, Some(1))?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll, None)
}

/// `(1 - alpha) * hard + alpha * tau^2 * soft + lambda_f * feature`.
/// Terms whose weight is zero are left out of the record.
pub fn distill_mix(g: &mut Graph, hard: Var, soft: Var, feature: Option<Var>, cfg: &DistillConfig) -> Result<Var> {
    let hard_w = 1.0 - cfg.alpha;
    let soft_w = cfg.alpha * cfg.tau * cfg.tau;
    let mut total = g.scale(hard, hard_w);
    if cfg.alpha != 0.0 {
        let s = g.scale(soft, soft_w);
        total = g.add(total, s)?;
    }
    if let Some(f) = feature {
        if cfg.lambda_f != 0.0 {
            let f = g.scale(f, cfg.lambda_f);
            total = g.add(total, f)?;
        }
    }
    Ok(total)
}

fn check_rows(g: &Graph, out: &ForwardOutput, labels: &[usize], soft: &Tensor) -> Result<()> {
    let n = g.shape(out.logits)[0];
    if labels.len() != n || soft.shape().first() != Some(&n) {
        return Err(Error::contract(format!(
            "misaligned batch: {n} logit rows, {} labels, soft rows {:?}",
            labels.len(),
            soft.shape()
        )));
    }
    if soft.shape() != g.shape(out.logits) {
        return Err(Error::ShapeMismatch {
            op: "soft labels",
            lhs: g.shape(out.logits).to_vec(),
            rhs: soft.shape().to_vec(),
        });
    }
    Ok(())
}

/// Hard cross-entropy and temperature KL against precomputed soft rows.
fn response_terms(
    g: &mut Graph,
    out: &ForwardOutput,
    labels: &[usize],
    soft: &Tensor,
    cfg: &DistillConfig,
) -> Result<(Var, Var)> {
    check_rows(g, out, labels, soft)?;
    let hard = cross_entropy(g, out.logits, labels)?;
    let soft_term = if cfg.alpha != 0.0 {
        let target = g.constant(soft.clone());
        let q = temp_softmax(g, out.logits, cfg.tau)?;
        kl_div(g, target, q)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    Ok((hard, soft_term))
}

/// Assistant distillation loss against teacher soft labels `soft` (`[N, K]`).
pub fn assistant_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    labels: &[usize],
    soft: &Tensor,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (hard, soft_term) = response_terms(g, out, labels, soft, cfg)?;
    distill_mix(g, hard, soft_term, None, cfg)
}

/// Feature-matching term between a projected student feature and a fixed
/// guide feature.
pub fn feature_term(g: &mut Graph, projected: Var, target: &Tensor, kind: FeatureLoss) -> Result<Var> {
    if g.shape(projected) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_term",
            lhs: g.shape(projected).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let target = g.constant(target.clone());
    match kind {
        FeatureLoss::KlSoftmax => {
            let p = softmax(g, target)?;
            let q = softmax(g, projected)?;
            kl_div(g, p, q)
        }
        FeatureLoss::Mse => {
            let d = g.sub(projected, target)?;
            let sq = g.mul(d, d)?;
            g.mean(sq, None)
        }
    }
}

/// Student distillation loss. `projection` is `[guide_dim, student_dim]`
/// and maps the student feature onto the guide feature `[N, guide_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn student_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    labels: &[usize],
    soft: &Tensor,
    guide_feature: &Tensor,
    projection: Var,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (hard, soft_term) = response_terms(g, out, labels, soft, cfg)?;
    let student_dim = g.shape(out.feature)[1];
    let guide_dim = *guide_feature.shape().get(1).unwrap_or(&0);
    if g.shape(projection) != [guide_dim, student_dim] {
        return Err(Error::contract(format!(
            "projection must be [{guide_dim}, {student_dim}], got {:?}",
            g.shape(projection)
        )));
    }
    let feature = if cfg.lambda_f != 0.0 {
        let projected = g.matmul_t(out.feature, projection)?;
        Some(feature_term(g, projected, guide_feature, cfg.feature_loss)?)
    } else {
        None
    };
    distill_mix(g, hard, soft_term, feature, cfg)
}

/// Temperature-softened output distributions of a trained model, one row
/// per training sample in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    pub probs: Tensor,
    pub tau: f64,
    /// [`crate::nn::ParamStore::content_hash`] of the producing checkpoint.
    pub producer_hash: u64,
}

impl SoftLabelSet {
    /// Soft labels from precomputed logits (`[M, K]`).
    pub fn from_logits(logits: &Tensor, tau: f64, producer_hash: u64) -> Result<Self> {
        let mut g = Graph::new();
        let z = g.constant(logits.clone());
        let p = temp_softmax(&mut g, z, tau)?;
        Ok(SoftLabelSet {
            probs: g.value(p).clone(),
            tau,
            producer_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn rows(&self, indices: &[usize]) -> Result<Tensor> {
        self.probs.gather_rows(indices)
    }

    pub fn write_dfsl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DFSL_MAGIC)?;
        w.write_all(&DFSL_VERSION.to_le_bytes())?;
        w.write_all(&self.tau.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.num_classes() as u64).to_le_bytes())?;
        w.write_all(&self.producer_hash.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.probs.numel() * 8);
        for v in self.probs.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_dfsl<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "DFSL")?;
        if &magic != DFSL_MAGIC {
            return Err(Error::format("DFSL", format!("bad magic {magic:?}")));
        }
        let version = read_u16(r, "DFSL")?;
        if version != DFSL_VERSION {
            return Err(Error::format("DFSL", format!("unsupported version {version}")));
        }
        let tau = read_f64(r, "DFSL")?;
        let m = read_u64(r, "DFSL")? as usize;
        let k = read_u64(r, "DFSL")? as usize;
        let producer_hash = read_u64(r, "DFSL")?;
        let numel = m.checked_mul(k).ok_or_else(|| Error::format("DFSL", "size overflow"))?;
        let mut bytes = vec![0u8; numel * 8];
        read_exact(r, &mut bytes, "DFSL")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let probs = Tensor::new(vec![m, k], data).map_err(|e| Error::format("DFSL", e.to_string()))?;
        Ok(SoftLabelSet {
            probs,
            tau,
            producer_hash,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_dfsl(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let s = Self::read_dfsl(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::format("DFSL", format!("{} trailing bytes", bytes.len())));
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_dfsl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_dfsl(&mut BufReader::new(file))
    }
}

/// Soft labels of `model` for every row of `images` (`[M, C, H, W]`, already
/// normalized), in row order. Runs without recording gradients.
pub fn make_soft_labels(model: &ParamStore, images: &Tensor, tau: f64, batch_size: usize) -> Result<SoftLabelSet> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let pred = model.predict(images, batch_size)?;
    SoftLabelSet::from_logits(&pred.logits, tau, model.content_hash())
}
