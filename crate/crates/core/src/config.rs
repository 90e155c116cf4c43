//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys that are not listed in [`ExperimentConfig::KEYS`] and keys given
//! twice are rejected. Serialization writes every key in a fixed order, so
//! equal configurations produce identical text.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{padded_size, AugmentParams};
use crate::error::{Error, Result};
use crate::losses::{DistillConfig, FeatureLoss};
use crate::nn::{ModelConfig, ModelKind};
use crate::train::{AblationModels, Selection, TrainConfig};

/// Conv block count of the teacher, or the default for the input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherDepth {
    Auto,
    Fixed(usize),
}

impl fmt::Display for TeacherDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherDepth::Auto => f.write_str("auto"),
            TeacherDepth::Fixed(d) => write!(f, "{d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Requested image side; inputs are padded up to a multiple of 16.
    pub image_size: usize,
    pub channels: usize,
    pub data_seed: u64,

    pub hidden_fc: usize,
    pub teacher_depth: TeacherDepth,

    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub selection: Selection,
    pub validation_fraction: f64,

    pub tau: f64,
    pub alpha: f64,
    pub lambda_f: f64,
    pub feature_loss: FeatureLoss,

    pub augment: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub augment_distill_inputs: bool,

    pub repeats: usize,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let aug = AugmentParams::default();
        ExperimentConfig {
            num_classes: 10,
            per_class_train: 200,
            per_class_test: 50,
            image_size: 64,
            channels: 1,
            data_seed: 0,
            hidden_fc: crate::nn::DEFAULT_HIDDEN_FC,
            teacher_depth: TeacherDepth::Auto,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: train.seed,
            selection: train.selection,
            validation_fraction: train.validation_fraction,
            tau: train.distill.tau,
            alpha: train.distill.alpha,
            lambda_f: train.distill.lambda_f,
            feature_loss: train.distill.feature_loss,
            augment: true,
            brightness: aug.brightness,
            contrast: aug.contrast,
            augment_distill_inputs: train.augment_distill_inputs,
            repeats: 5,
            record_wall_time: train.record_wall_time,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key}: expected true or false"
        ))),
    }
}

impl ExperimentConfig {
    /// Every accepted key, in serialization order.
    pub const KEYS: [&'static str; 26] = [
        "num_classes",
        "per_class_train",
        "per_class_test",
        "image_size",
        "channels",
        "data_seed",
        "hidden_fc",
        "teacher_depth",
        "learning_rate",
        "momentum",
        "weight_decay",
        "epochs",
        "batch_size",
        "seed",
        "selection",
        "validation_fraction",
        "tau",
        "alpha",
        "lambda_f",
        "feature_loss",
        "augment",
        "brightness",
        "contrast",
        "augment_distill_inputs",
        "repeats",
        "record_wall_time",
    ];

    /// Assign one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse(key, value)?,
            "per_class_train" => self.per_class_train = parse(key, value)?,
            "per_class_test" => self.per_class_test = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "hidden_fc" => self.hidden_fc = parse(key, value)?,
            "teacher_depth" => {
                self.teacher_depth = match value {
                    "auto" => TeacherDepth::Auto,
                    v => TeacherDepth::Fixed(parse(key, v)?),
                }
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "selection" => {
                self.selection = match value {
                    "test" => Selection::Test,
                    "validation" => Selection::Validation,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value {value:?} for selection: expected test or validation"
                        )))
                    }
                }
            }
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda_f" => self.lambda_f = parse(key, value)?,
            "feature_loss" => {
                self.feature_loss = FeatureLoss::parse(value).ok_or_else(|| {
                    Error::Config(format!(
                        "invalid value {value:?} for feature_loss: expected kl_softmax or mse"
                    ))
                })?
            }
            "augment" => self.augment = parse_bool(key, value)?,
            "brightness" => self.brightness = parse(key, value)?,
            "contrast" => self.contrast = parse(key, value)?,
            "augment_distill_inputs" => self.augment_distill_inputs = parse_bool(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "num_classes" => self.num_classes.to_string(),
            "per_class_train" => self.per_class_train.to_string(),
            "per_class_test" => self.per_class_test.to_string(),
            "image_size" => self.image_size.to_string(),
            "channels" => self.channels.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "hidden_fc" => self.hidden_fc.to_string(),
            "teacher_depth" => self.teacher_depth.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "selection" => self.selection.name().to_string(),
            "validation_fraction" => self.validation_fraction.to_string(),
            "tau" => self.tau.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda_f" => self.lambda_f.to_string(),
            "feature_loss" => self.feature_loss.name().to_string(),
            "augment" => self.augment.to_string(),
            "brightness" => self.brightness.to_string(),
            "contrast" => self.contrast.to_string(),
            "augment_distill_inputs" => self.augment_distill_inputs.to_string(),
            "repeats" => self.repeats.to_string(),
            "record_wall_time" => self.record_wall_time.to_string(),
            _ => return None,
        })
    }

    /// Parse and validate configuration text, starting from the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("config error: ")
                ))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse_str(&text)
    }

    /// Every key in fixed order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return bad(format!("num_classes must lie in [2, 65535], got {}", self.num_classes));
        }
        if self.per_class_train == 0 || self.per_class_test == 0 {
            return bad("per_class_train and per_class_test must be positive".into());
        }
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.hidden_fc == 0 {
            return bad("hidden_fc must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.brightness) || !(0.0..=1.0).contains(&self.contrast) {
            return bad("brightness and contrast must lie in [0, 1]".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let TeacherDepth::Fixed(_) = self.teacher_depth {
            crate::nn::count_params(&self.model_config(ModelKind::Teacher))
                .and_then(|_| crate::nn::min_teacher_depth(&self.model_config(ModelKind::Teacher)))
                .and_then(|min| match self.teacher_depth {
                    TeacherDepth::Fixed(d) if d < min => Err(Error::Contract(format!(
                        "teacher_depth {d} is too shallow; use teacher_depth >= {min}"
                    ))),
                    _ => Ok(()),
                })
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Side of the square model input: `image_size` rounded up to a multiple of 16.
    pub fn input_size(&self) -> usize {
        padded_size(self.image_size)
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let mut cfg = ModelConfig::for_kind(kind, self.input_size(), self.num_classes);
        cfg.in_channels = self.channels;
        cfg.hidden_fc = self.hidden_fc;
        if kind == ModelKind::Teacher {
            if let TeacherDepth::Fixed(d) = self.teacher_depth {
                cfg.teacher_depth = d;
            }
        }
        cfg
    }

    pub fn models(&self) -> AblationModels {
        AblationModels {
            teacher: self.model_config(ModelKind::Teacher),
            assistant: self.model_config(ModelKind::Assistant),
            student: self.model_config(ModelKind::Student),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            tau: self.tau,
            alpha: self.alpha,
            lambda_f: self.lambda_f,
            feature_loss: self.feature_loss,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            distill: self.distill_config(),
            augment: self.augment.then_some(AugmentParams {
                brightness: self.brightness,
                contrast: self.contrast,
            }),
            augment_distill_inputs: self.augment_distill_inputs,
            selection: self.selection,
            validation_fraction: self.validation_fraction,
            record_wall_time: self.record_wall_time,
        }
    }
}
