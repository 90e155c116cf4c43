use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ParamStore};

use super::{
    train_assistant, train_baseline_student, train_student, train_teacher, Guidance, MetricsReport, TrainConfig,
    TrainOutcome,
};

/// The three ways of obtaining a student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Labels only.
    StudentAlone,
    /// Distilled directly from the teacher.
    TeacherStudent,
    /// Distilled from an assistant that was distilled from the teacher.
    TeacherAssistantStudent,
}

impl Regime {
    pub const ALL: [Regime; 3] = [
        Regime::StudentAlone,
        Regime::TeacherStudent,
        Regime::TeacherAssistantStudent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::StudentAlone => "student_alone",
            Regime::TeacherStudent => "teacher_student",
            Regime::TeacherAssistantStudent => "teacher_assistant_student",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationModels {
    pub teacher: ModelConfig,
    pub assistant: ModelConfig,
    pub student: ModelConfig,
}

/// One student training run of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub regime: Regime,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub regime: Regime,
    pub teacher: String,
    pub assistant: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation (0 for a single seed).
    pub stddev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    teacher: &'a str,
    assistant: &'a str,
    mean_accuracy: f64,
    stddev: f64,
    seeds: String,
}

impl AblationTable {
    pub fn row(&self, regime: Regime) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.regime == regime)
    }

    /// CSV with columns `teacher,assistant,mean_accuracy,stddev,seeds`;
    /// seeds are joined with `;`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            w.serialize(CsvRow {
                teacher: &r.teacher,
                assistant: &r.assistant,
                mean_accuracy: r.mean_accuracy,
                stddev: r.stddev,
                seeds,
            })
            .map_err(|e| Error::format("CSV", e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("CSV", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

/// Progress notifications, in the order they happen.
pub enum AblationEvent<'a> {
    /// A teacher or assistant finished training.
    Stage(&'a TrainOutcome),
    /// One student of the grid finished.
    Run(&'a RunRecord, &'a TrainOutcome),
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train one teacher and one assistant (seeded by `cfg.seed`; pass
/// already trained ones to reuse them), then `repeats` students per regime
/// with seeds `cfg.seed, cfg.seed + 1, ...`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    models: &AblationModels,
    cfg: &TrainConfig,
    repeats: usize,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    teacher: Option<ParamStore>,
    assistant: Option<ParamStore>,
    on_event: &mut dyn FnMut(AblationEvent<'_>) -> Result<()>,
) -> Result<AblationTable> {
    if repeats == 0 {
        return Err(Error::contract("repeats must be at least 1"));
    }
    cfg.validate()?;
    let teacher = match teacher {
        Some(t) => t,
        None => {
            let out = train_teacher(models.teacher, cfg, train, test)?;
            on_event(AblationEvent::Stage(&out))?;
            out.params
        }
    };
    let batch = cfg.batch_size;
    let from_teacher = Guidance::from_model(&teacher, train, cfg.distill.tau, batch)?;
    let assistant = match assistant {
        Some(a) => a,
        None => {
            let out = train_assistant(models.assistant, cfg, train, test, &from_teacher.soft)?;
            on_event(AblationEvent::Stage(&out))?;
            out.params
        }
    };
    let from_assistant = Guidance::from_model(&assistant, train, cfg.distill.tau, batch)?;

    let teacher_name = format!("teacher_d{}", models.teacher.teacher_depth);
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| cfg.seed + r).collect();
    let mut rows = Vec::new();
    for regime in Regime::ALL {
        let mut accuracies = Vec::with_capacity(repeats);
        for &seed in &seeds {
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let mut out = match regime {
                Regime::StudentAlone => train_baseline_student(models.student, &run_cfg, train, test)?,
                Regime::TeacherStudent => train_student(models.student, &run_cfg, train, test, &from_teacher)?,
                Regime::TeacherAssistantStudent => {
                    train_student(models.student, &run_cfg, train, test, &from_assistant)?
                }
            };
            out.report.config.insert("regime".into(), regime.name().into());
            let record = RunRecord {
                regime,
                seed,
                report: out.report.clone(),
            };
            accuracies.push(record.report.accuracy);
            on_event(AblationEvent::Run(&record, &out))?;
        }
        let (mean_accuracy, stddev) = mean_std(&accuracies);
        let (teacher_col, assistant_col) = match regime {
            Regime::StudentAlone => ("none".to_string(), "none"),
            Regime::TeacherStudent => (teacher_name.clone(), "none"),
            Regime::TeacherAssistantStudent => (teacher_name.clone(), "assistant"),
        };
        rows.push(AblationRow {
            regime,
            teacher: teacher_col,
            assistant: assistant_col.to_string(),
            seeds: seeds.clone(),
            accuracies,
            mean_accuracy,
            stddev,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_stddev() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn csv_layout() {
        let table = AblationTable {
            rows: vec![AblationRow {
                regime: Regime::StudentAlone,
                teacher: "none".into(),
                assistant: "none".into(),
                seeds: vec![0, 1, 2],
                accuracies: vec![0.5, 0.5, 0.5],
                mean_accuracy: 0.5,
                stddev: 0.0,
            }],
        };
        let csv = table.to_csv().unwrap();
        assert_eq!(
            csv,
            "teacher,assistant,mean_accuracy,stddev,seeds\nnone,none,0.5,0.0,0;1;2\n"
        );
    }
}
