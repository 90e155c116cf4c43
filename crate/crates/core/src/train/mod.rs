//! Optimizer, the three training stages, evaluation and the ablation grid.

mod ablation;
mod metrics;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, normalize, AugmentParams, LabeledImageSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{assistant_loss, cross_entropy, student_loss, DistillConfig, SoftLabelSet};
use crate::nn::{self, models, ForwardOutput, ModelConfig, ModelKind, ParamStore};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

pub use ablation::{run_ablation, AblationEvent, AblationModels, AblationRow, AblationTable, Regime, RunRecord};
pub use metrics::{argmax_rows, evaluate, predict_classes, ClassMetrics, MetricsReport};
pub use optim::{sgd_nesterov_step, OptimizerState, SgdConfig};

/// Which held-out set picks the retained checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Best test accuracy.
    Test,
    /// Best accuracy on a split carved from the training set.
    Validation,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Test => "test",
            Selection::Validation => "validation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub distill: DistillConfig,
    /// Brightness and contrast jitter for supervised stages; `None` disables it.
    pub augment: Option<AugmentParams>,
    /// Also jitter the inputs of distilled stages (targets stay clean).
    pub augment_distill_inputs: bool,
    pub selection: Selection,
    pub validation_fraction: f64,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.95,
            weight_decay: 0.001,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            distill: DistillConfig::default(),
            augment: Some(AugmentParams::default()),
            augment_distill_inputs: false,
            selection: Selection::Test,
            validation_fraction: 0.1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be at least 1"));
        }
        if self.selection == Selection::Validation
            && !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0)
        {
            return Err(Error::contract(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        self.distill.validate()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Flat description of every knob, embedded in reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let (b, c) = self.augment.map_or((0.0, 0.0), |a| (a.brightness, a.contrast));
        [
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("tau", self.distill.tau.to_string()),
            ("alpha", self.distill.alpha.to_string()),
            ("lambda_f", self.distill.lambda_f.to_string()),
            ("feature_loss", self.distill.feature_loss.name().to_string()),
            ("augment", self.augment.is_some().to_string()),
            ("brightness", b.to_string()),
            ("contrast", c.to_string()),
            ("augment_distill_inputs", self.augment_distill_inputs.to_string()),
            ("selection", self.selection.name().to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy on the training batches as they were presented.
    pub train_accuracy: f64,
    pub selection_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub params: ParamStore,
    /// Student feature projection `[guide_dim, student_dim]` (distilled students only).
    pub projection: Option<Tensor>,
    /// Test metrics of the selected parameters.
    pub report: MetricsReport,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Soft labels and features of a trained guide model on every training
/// sample, computed once on clean normalized images.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub kind: ModelKind,
    pub soft: SoftLabelSet,
    /// `[M, guide feature dim]`
    pub features: Tensor,
}

impl Guidance {
    pub fn from_model(model: &ParamStore, train: &LabeledImageSet, tau: f64, batch_size: usize) -> Result<Self> {
        check_data(model.config(), train)?;
        let pred = model.predict(&normalize(&train.images), batch_size)?;
        Ok(Guidance {
            kind: model.kind(),
            soft: SoftLabelSet::from_logits(&pred.logits, tau, model.content_hash())?,
            features: pred.features,
        })
    }
}

/// Model configuration of `kind` for the shape of `data`.
pub fn model_config_for(
    kind: ModelKind,
    data: &LabeledImageSet,
    hidden_fc: usize,
    teacher_depth: Option<usize>,
) -> ModelConfig {
    let mut cfg = ModelConfig::for_kind(kind, data.image_size(), data.num_classes());
    cfg.in_channels = data.channels();
    cfg.hidden_fc = hidden_fc;
    if kind == ModelKind::Teacher {
        cfg.teacher_depth =
            teacher_depth.unwrap_or_else(|| ModelConfig::teacher(cfg.input_size, cfg.num_classes).teacher_depth);
    }
    cfg
}

fn check_data(cfg: &ModelConfig, data: &LabeledImageSet) -> Result<()> {
    if cfg.input_size != data.image_size()
        || cfg.in_channels != data.channels()
        || cfg.num_classes != data.num_classes()
    {
        return Err(Error::contract(format!(
            "{} expects {} classes of {}x{}x{} images, data set has {} classes of {}x{}x{}",
            cfg.kind,
            cfg.num_classes,
            cfg.in_channels,
            cfg.input_size,
            cfg.input_size,
            data.num_classes(),
            data.channels(),
            data.image_size(),
            data.image_size()
        )));
    }
    if data.is_empty() {
        return Err(Error::contract("empty data set"));
    }
    Ok(())
}

/// Per-batch loss: graph, forward output, training-set row indices, labels
/// and the projection leaf if one is trained.
type LossFn<'a> = dyn Fn(&mut Graph, &ForwardOutput, &[usize], &[usize], Option<Var>) -> Result<Var> + 'a;

struct Job<'a> {
    model: ModelConfig,
    cfg: &'a TrainConfig,
    train: &'a LabeledImageSet,
    test: &'a LabeledImageSet,
    augment: Option<AugmentParams>,
    projection: Option<Tensor>,
}

fn split_for_selection(cfg: &TrainConfig, m: usize) -> (Vec<usize>, Vec<usize>) {
    match cfg.selection {
        Selection::Test => ((0..m).collect(), Vec::new()),
        Selection::Validation => {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng::stream(cfg.seed, Domain::Split, 0));
            let n_val = ((m as f64 * cfg.validation_fraction).round() as usize).clamp(1, m.saturating_sub(1).max(1));
            let (val, fit) = order.split_at(n_val);
            let (mut val, mut fit) = (val.to_vec(), fit.to_vec());
            val.sort_unstable();
            fit.sort_unstable();
            (fit, val)
        }
    }
}

fn accuracy(model: &ParamStore, images: &Tensor, labels: &[usize], batch_size: usize) -> Result<f64> {
    let pred = argmax_rows(&model.predict(images, batch_size)?.logits);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn fit(job: Job<'_>, loss_fn: &LossFn<'_>) -> Result<TrainOutcome> {
    let Job {
        model: model_cfg,
        cfg,
        train,
        test,
        augment: jitter,
        mut projection,
    } = job;
    cfg.validate()?;
    check_data(&model_cfg, train)?;
    check_data(&model_cfg, test)?;
    let started = Instant::now();
    let mut model = models::init_params(nn::build(&model_cfg)?, cfg.seed);
    let mut opt = OptimizerState::for_store(&model);
    let mut proj_opt = projection.as_ref().map(|p| OptimizerState::zeros_like([p]));
    let sgd = cfg.sgd();

    let clean = normalize(&train.images);
    let (fit_rows, val_rows) = split_for_selection(cfg, train.len());
    let (sel_images, sel_labels) = if val_rows.is_empty() {
        (normalize(&test.images), test.labels.clone())
    } else {
        (
            clean.gather_rows(&val_rows)?,
            val_rows.iter().map(|&i| train.labels[i]).collect(),
        )
    };

    let mut best: Option<(f64, usize, ParamStore, Option<Tensor>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order = fit_rows.clone();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::Shuffle, epoch as u64));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = match jitter {
                Some(p) => normalize(&augment(
                    &train.images.gather_rows(rows)?,
                    &p,
                    rng::derive(cfg.seed, epoch as u64, step as u64),
                )),
                None => clean.gather_rows(rows)?,
            };
            let labels: Vec<usize> = rows.iter().map(|&i| train.labels[i]).collect();

            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let proj_var = projection.as_ref().map(|p| g.param(p.clone()));
            let x = g.constant(batch);
            let out = nn::forward(&mut g, &bound, x)?;
            let loss = loss_fn(&mut g, &out, rows, &labels, proj_var)?;
            let vars = bound.vars().to_vec();
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: value,
                });
            }
            hits += argmax_rows(g.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            loss_sum += value * rows.len() as f64;

            let mut grads = g.backward(loss)?;
            let param_grads = vars
                .iter()
                .map(|&v| {
                    grads
                        .take(v)
                        .ok_or_else(|| Error::contract("missing parameter gradient"))
                })
                .collect::<Result<Vec<_>>>()?;
            sgd_nesterov_step(&mut model, &param_grads, &mut opt, &sgd)?;
            if let (Some(p), Some(v), Some(state)) = (projection.as_mut(), proj_var, proj_opt.as_mut()) {
                let gp = grads
                    .take(v)
                    .ok_or_else(|| Error::contract("missing projection gradient"))?;
                state.step([p], &[gp], &sgd)?;
            }
            debug!("{} epoch {epoch} step {step} loss {value}", model_cfg.kind);
        }
        let n = order.len() as f64;
        let sel_acc = accuracy(&model, &sel_images, &sel_labels, cfg.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: hits as f64 / n,
            selection_accuracy: sel_acc,
        };
        info!(
            "{} epoch {epoch}/{}: loss {:.5} train acc {:.4} {} acc {:.4}",
            model_cfg.kind,
            cfg.epochs,
            log.train_loss,
            log.train_accuracy,
            cfg.selection.name(),
            sel_acc
        );
        history.push(log);
        if best.as_ref().is_none_or(|b| sel_acc > b.0) {
            best = Some((sel_acc, epoch, model.clone(), projection.clone()));
        }
    }
    let (_, best_epoch, params, projection) = best.expect("at least one epoch");
    let mut report = evaluate(&params, test, cfg.batch_size)?;
    report.config = cfg.echo();
    report.config.insert("model".into(), model_cfg.kind.name().into());
    report.config.insert("best_epoch".into(), best_epoch.to_string());
    report.seed = cfg.seed;
    report.wall_time_s = cfg.record_wall_time.then(|| started.elapsed().as_secs_f64());
    Ok(TrainOutcome {
        params,
        projection,
        report,
        history,
        best_epoch,
    })
}

fn supervised(g: &mut Graph, out: &ForwardOutput, labels: &[usize]) -> Result<Var> {
    cross_entropy(g, out.logits, labels)
}

/// Stage 1: cross-entropy on augmented batches.
pub fn train_teacher(
    model: ModelConfig,
    cfg: &TrainConfig,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
) -> Result<TrainOutcome> {
    train_supervised(model, cfg, train, test, cfg.augment)
}

/// Cross-entropy training of any model with an explicit jitter setting.
pub fn train_supervised(
    model: ModelConfig,
    cfg: &TrainConfig,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    jitter: Option<AugmentParams>,
) -> Result<TrainOutcome> {
    let job = Job {
        model,
        cfg,
        train,
        test,
        augment: jitter,
        projection: None,
    };
    fit(job, &|g, out, _, labels, _| supervised(g, out, labels))
}

fn distill_jitter(cfg: &TrainConfig) -> Option<AugmentParams> {
    if cfg.augment_distill_inputs {
        cfg.augment
    } else {
        None
    }
}

fn check_soft(soft: &SoftLabelSet, cfg: &TrainConfig, train: &LabeledImageSet) -> Result<()> {
    if soft.tau != cfg.distill.tau {
        return Err(Error::contract(format!(
            "soft labels were made at tau {} but the run uses tau {}",
            soft.tau, cfg.distill.tau
        )));
    }
    if soft.len() != train.len() || soft.num_classes() != train.num_classes() {
        return Err(Error::contract(format!(
            "soft labels are {}x{}, training set has {} samples of {} classes",
            soft.len(),
            soft.num_classes(),
            train.len(),
            train.num_classes()
        )));
    }
    Ok(())
}

/// Stage 2: assistant distilled from precomputed teacher soft labels.
pub fn train_assistant(
    model: ModelConfig,
    cfg: &TrainConfig,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    teacher_soft: &SoftLabelSet,
) -> Result<TrainOutcome> {
    check_soft(teacher_soft, cfg, train)?;
    let job = Job {
        model,
        cfg,
        train,
        test,
        augment: distill_jitter(cfg),
        projection: None,
    };
    fit(job, &|g, out, rows, labels, _| {
        let soft = teacher_soft.rows(rows)?;
        assistant_loss(g, out, labels, &soft, &cfg.distill)
    })
}

/// Stage 3: student distilled from a guide's soft labels and features,
/// with a jointly trained feature projection.
pub fn train_student(
    model: ModelConfig,
    cfg: &TrainConfig,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    guide: &Guidance,
) -> Result<TrainOutcome> {
    check_soft(&guide.soft, cfg, train)?;
    if guide.features.shape().first() != Some(&train.len()) {
        return Err(Error::contract("guide features are not aligned with the training set"));
    }
    let guide_dim = guide.features.shape()[1];
    let mut projection = Tensor::zeros(&[guide_dim, nn::feature_dim(&model)]);
    models::init_glorot(
        &mut projection,
        nn::feature_dim(&model),
        guide_dim,
        cfg.seed,
        PROJECTION_STREAM,
    );
    let job = Job {
        model,
        cfg,
        train,
        test,
        augment: distill_jitter(cfg),
        projection: Some(projection),
    };
    fit(job, &|g, out, rows, labels, proj| {
        let soft = guide.soft.rows(rows)?;
        let feat = guide.features.gather_rows(rows)?;
        let proj = proj.ok_or_else(|| Error::contract("student training needs a projection"))?;
        student_loss(g, out, labels, &soft, &feat, proj, &cfg.distill)
    })
}

/// The no-teacher reference: the student trained on labels alone under the
/// same input pipeline as the distilled students.
pub fn train_baseline_student(
    model: ModelConfig,
    cfg: &TrainConfig,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
) -> Result<TrainOutcome> {
    train_supervised(model, cfg, train, test, distill_jitter(cfg))
}

/// Init stream of the student feature projection, apart from model entries.
const PROJECTION_STREAM: u64 = 1 << 40;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn supervised_run_is_deterministic() {
        let (train, test) = generate_dataset(2, 4, 2, 16, 1).unwrap();
        let model = model_config_for(ModelKind::Student, &train, 8, None);
        let cfg = tiny_cfg();
        let a = train_teacher(model, &cfg, &train, &test).unwrap();
        let b = train_teacher(model, &cfg, &train, &test).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(a.report, b.report);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.report.config["model"], "student");
    }

    #[test]
    fn tau_mismatch_is_rejected() {
        let (train, test) = generate_dataset(2, 2, 1, 16, 1).unwrap();
        let model = model_config_for(ModelKind::Student, &train, 8, None);
        let soft = SoftLabelSet::from_logits(&Tensor::zeros(&[4, 2]), 2.0, 0).unwrap();
        let err = train_assistant(model, &tiny_cfg(), &train, &test, &soft).unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");
    }

    #[test]
    fn validation_split_is_disjoint() {
        let cfg = TrainConfig {
            selection: Selection::Validation,
            validation_fraction: 0.25,
            ..TrainConfig::default()
        };
        let (fit, val) = split_for_selection(&cfg, 20);
        assert_eq!(val.len(), 5);
        assert_eq!(fit.len(), 15);
        assert!(val.iter().all(|v| !fit.contains(v)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
