use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::normalize;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Set when any of the three ratios had a zero denominator and was
    /// reported as 0.
    pub zero_denominator: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub wall_time_s: Option<f64>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl MetricsReport {
    /// Metrics of a square confusion matrix. F-score is evaluated as
    /// `2 TP / (2 TP + FP + FN)`, which equals `2 P R / (P + R)`.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, names: &[String]) -> Result<Self> {
        let k = confusion.len();
        if names.len() != k || confusion.iter().any(|row| row.len() != k) {
            return Err(Error::contract(format!(
                "confusion matrix must be {k}x{k} with {k} class names"
            )));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::contract("cannot report metrics for an empty test set"));
        }
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
                let actual: u64 = confusion[c].iter().sum();
                let (precision, zp) = ratio(tp, predicted);
                let (recall, zr) = ratio(tp, actual);
                let (f_score, zf) = ratio(2 * tp, predicted + actual);
                ClassMetrics {
                    name: names[c].clone(),
                    precision,
                    recall,
                    f_score,
                    zero_denominator: zp || zr || zf,
                }
            })
            .collect();
        Ok(MetricsReport {
            accuracy: trace as f64 / total as f64,
            confusion,
            per_class,
            config: BTreeMap::new(),
            seed: 0,
            wall_time_s: None,
        })
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], names: &[String]) -> Result<Self> {
        let k = names.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= k || p >= k {
                return Err(Error::contract(format!("class index out of range for {k} classes")));
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion, names)
    }

    /// Test count per class (confusion row sums).
    pub fn class_totals(&self) -> Vec<u64> {
        self.confusion.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("report JSON", e.to_string()))
    }

    /// Fixed-width per-class table with the values printed exactly as they
    /// appear in the JSON form.
    pub fn table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<width$}  {:<20}  {:<20}  {:<20}\n",
            "Script", "Precision", "Recall", "F-Score"
        );
        for c in &self.per_class {
            let flag = if c.zero_denominator { "  *" } else { "" };
            out.push_str(&format!(
                "{:<width$}  {:<20}  {:<20}  {:<20}{flag}\n",
                c.name, c.precision, c.recall, c.f_score
            ));
        }
        out.push_str(&format!("Accuracy {}\n", self.accuracy));
        if self.per_class.iter().any(|c| c.zero_denominator) {
            out.push_str("* zero denominator reported as 0\n");
        }
        out
    }
}

/// Index of the largest entry of each row; the lowest index wins ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted classes of `model` for a set of raw `[0, 1]` images.
pub fn predict_classes(model: &ParamStore, set: &LabeledImageSet, batch_size: usize) -> Result<Vec<usize>> {
    let pred = model.predict(&normalize(&set.images), batch_size)?;
    Ok(argmax_rows(&pred.logits))
}

/// Accuracy and per-class metrics of `model` on `set`.
pub fn evaluate(model: &ParamStore, set: &LabeledImageSet, batch_size: usize) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty test set"));
    }
    let cfg = model.config();
    if cfg.num_classes != set.num_classes() {
        return Err(Error::contract(format!(
            "model predicts {} classes, data set has {}",
            cfg.num_classes,
            set.num_classes()
        )));
    }
    if cfg.input_size != set.image_size() || cfg.in_channels != set.channels() {
        return Err(Error::contract(format!(
            "model expects {}x{}x{} inputs, data set holds {}x{}x{}",
            cfg.in_channels,
            cfg.input_size,
            cfg.input_size,
            set.channels(),
            set.image_size(),
            set.image_size()
        )));
    }
    let predictions = predict_classes(model, set, batch_size)?;
    MetricsReport::from_predictions(&set.labels, &predictions, &set.class_names)
}
