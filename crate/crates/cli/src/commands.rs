use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use tadistill_core::data::{generate_dataset, load_image_folder, LabeledImageSet, Split};
use tadistill_core::losses::SoftLabelSet;
use tadistill_core::nn::ModelKind;
use tadistill_core::train::{
    evaluate, run_ablation, train_assistant, train_student, train_teacher, AblationEvent, Guidance, MetricsReport,
    TrainOutcome,
};
use tadistill_core::{Error, ExperimentConfig, ParamStore, Tensor};

use crate::manifest::{sha256_file, sha256_hex, Manifest};
use crate::{Command, Common, Guide, Stage};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Train { stage, guide, common } => train(stage, guide, &common),
        Command::Evaluate { checkpoint, common } => evaluate_checkpoint(&checkpoint, &common),
        Command::Ablate { common } => ablate(&common),
        Command::Import {
            images,
            split,
            permissive,
            common,
        } => import(&images, &split, permissive, &common),
    }
}

fn load_config(common: &Common, seed_key: &str) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::File { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string())?;
    }
    if let Some(repeats) = common.repeats {
        cfg.set("repeats", &repeats.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Hash of the configuration text with the repeat count left out: it changes
/// how many students an ablation trains, not what any single stage produces.
fn stage_config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.repeats = 1;
    sha256_hex(c.to_text().as_bytes())
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common, "data_seed")?;
    if cfg.channels != 1 {
        return Err(Error::Config("synthetic data is single-channel; set channels = 1".into()).into());
    }
    create_out(&common.out)?;
    let (train, test) = generate_dataset(
        cfg.num_classes,
        cfg.per_class_train,
        cfg.per_class_test,
        cfg.input_size(),
        cfg.data_seed,
    )?;
    train.save_dir(&common.out)?;
    test.save_dir(&common.out)?;
    let files = [
        "train.images.dftn",
        "train.labels.dflb",
        "test.images.dftn",
        "test.labels.dflb",
        "classes.txt",
    ];
    let hashes: BTreeMap<&str, String> = files
        .iter()
        .map(|f| Ok((*f, sha256_file(&common.out.join(f))?)))
        .collect::<Result<_>>()?;
    let manifest = serde_json::json!({
        "seed": cfg.data_seed,
        "num_classes": cfg.num_classes,
        "train_count": train.len(),
        "test_count": test.len(),
        "image_size": cfg.image_size,
        "input_size": cfg.input_size(),
        "channels": cfg.channels,
        "files": hashes,
        "config": cfg.to_map(),
    });
    write_json(&common.out.join("manifest.json"), &manifest)?;
    info!(
        "wrote {} train and {} test images of {} classes to {}",
        train.len(),
        test.len(),
        cfg.num_classes,
        common.out.display()
    );
    Ok(())
}

fn import(images: &Path, split: &str, permissive: bool, common: &Common) -> Result<()> {
    let cfg = load_config(common, "data_seed")?;
    let mut set = load_image_folder(images, cfg.image_size, cfg.channels, permissive)?;
    set.split = if split == "train" { Split::Train } else { Split::Test };
    create_out(&common.out)?;
    set.save_dir(&common.out)?;
    info!(
        "imported {} images of {} classes as the {split} split",
        set.len(),
        set.num_classes()
    );
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let train = LabeledImageSet::load_dir(dir, Split::Train)
        .with_context(|| format!("loading training data from {}", dir.display()))?;
    let test = LabeledImageSet::load_dir(dir, Split::Test)
        .with_context(|| format!("loading test data from {}", dir.display()))?;
    for set in [&train, &test] {
        if set.num_classes() != cfg.num_classes
            || set.image_size() != cfg.input_size()
            || set.channels() != cfg.channels
        {
            return Err(Error::Config(format!(
                "{} split holds {} classes of {}x{}x{} images but the configuration expects {} classes of {}x{}x{}",
                set.split.name(),
                set.num_classes(),
                set.channels(),
                set.image_size(),
                set.image_size(),
                cfg.num_classes,
                cfg.channels,
                cfg.input_size(),
                cfg.input_size()
            ))
            .into());
        }
    }
    Ok((train, test))
}

/// Report with the full resolved configuration merged into its echo.
fn finish_report(mut report: MetricsReport, cfg: &ExperimentConfig, extra: &[(&str, String)]) -> MetricsReport {
    report.config.extend(cfg.to_map());
    for (k, v) in extra {
        report.config.insert(k.to_string(), v.clone());
    }
    report
}

/// Writes `<stem>.dfck`, `<stem>.report.json` and `<stem>.history.json`;
/// returns the file names.
fn save_outcome(dir: &Path, stem: &str, out: &TrainOutcome, report: &MetricsReport) -> Result<Vec<String>> {
    let ckpt = format!("{stem}.dfck");
    let rep = format!("{stem}.report.json");
    let hist = format!("{stem}.history.json");
    out.params.save(dir.join(&ckpt))?;
    write_text(&dir.join(&rep), &report.to_json())?;
    write_json(&dir.join(&hist), &out.history)?;
    Ok(vec![ckpt, rep, hist])
}

fn require_checkpoint(dir: &Path, stage: &'static str, dependency: &'static str) -> Result<(ParamStore, String)> {
    let path = dir.join(format!("{dependency}.dfck"));
    if !path.is_file() {
        return Err(Error::MissingDependency {
            stage,
            dependency,
            path,
        }
        .into());
    }
    let store = ParamStore::load(&path)?;
    if store.kind().name() != dependency {
        bail!(
            "{} holds a {} checkpoint, expected {dependency}",
            path.display(),
            store.kind()
        );
    }
    let sha = sha256_file(&path)?;
    Ok((store, sha))
}

/// Soft labels and features of `model` on the training set, reusing the
/// cached files when they were produced by this exact checkpoint.
fn guidance_cache(
    dir: &Path,
    stem: &str,
    model: &ParamStore,
    train: &LabeledImageSet,
    cfg: &ExperimentConfig,
) -> Result<(Guidance, Vec<String>)> {
    let soft_name = format!("{stem}.soft.dfsl");
    let feat_name = format!("{stem}.features.dftn");
    let (soft_path, feat_path) = (dir.join(&soft_name), dir.join(&feat_name));
    let hash = model.content_hash();
    let cached = SoftLabelSet::load(&soft_path).ok().zip(Tensor::load(&feat_path).ok());
    let guidance = match cached {
        Some((soft, features))
            if soft.producer_hash == hash
                && soft.tau == cfg.tau
                && soft.len() == train.len()
                && features.shape().first() == Some(&train.len()) =>
        {
            info!("reusing cached soft labels {}", soft_path.display());
            Guidance {
                kind: model.kind(),
                soft,
                features,
            }
        }
        _ => {
            info!(
                "computing {} soft labels at tau {} for {} samples",
                model.kind(),
                cfg.tau,
                train.len()
            );
            let g = Guidance::from_model(model, train, cfg.tau, cfg.batch_size)?;
            g.soft.save(&soft_path)?;
            g.features.save(&feat_path)?;
            g
        }
    };
    Ok((guidance, vec![soft_name, feat_name]))
}

fn train(stage: Stage, guide: Guide, common: &Common) -> Result<()> {
    let cfg = load_config(common, "seed")?;
    let (train_set, test_set) = load_data(&cfg, &common.data)?;
    let dir = &common.out;
    create_out(dir)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let tc = cfg.train_config();
    let cfg_hash = stage_config_hash(&cfg);
    let mut manifest = Manifest::load(dir)?;

    let (stem, outcome, mut files, depends_on, extra) = match stage {
        Stage::Teacher => {
            let out = train_teacher(cfg.model_config(ModelKind::Teacher), &tc, &train_set, &test_set)?;
            ("teacher", out, Vec::new(), BTreeMap::new(), Vec::new())
        }
        Stage::Assistant => {
            let (teacher, sha) = require_checkpoint(dir, "assistant", "teacher")?;
            let (guidance, cache) = guidance_cache(dir, "teacher", &teacher, &train_set, &cfg)?;
            let out = train_assistant(
                cfg.model_config(ModelKind::Assistant),
                &tc,
                &train_set,
                &test_set,
                &guidance.soft,
            )?;
            let deps = BTreeMap::from([("teacher".to_string(), sha)]);
            ("assistant", out, cache, deps, vec![("guide", "teacher".to_string())])
        }
        Stage::Student => {
            let (dependency, stem) = match guide {
                Guide::Assistant => ("assistant", "student"),
                Guide::Teacher => ("teacher", "student_direct"),
            };
            let (guide_model, sha) = require_checkpoint(dir, "student", dependency)?;
            let (guidance, cache) = guidance_cache(dir, dependency, &guide_model, &train_set, &cfg)?;
            let out = train_student(
                cfg.model_config(ModelKind::Student),
                &tc,
                &train_set,
                &test_set,
                &guidance,
            )?;
            let deps = BTreeMap::from([(dependency.to_string(), sha)]);
            (stem, out, cache, deps, vec![("guide", dependency.to_string())])
        }
    };
    let report = finish_report(outcome.report.clone(), &cfg, &extra);
    files.extend(save_outcome(dir, stem, &outcome, &report)?);
    if let Some(p) = &outcome.projection {
        let name = format!("{stem}.projection.dftn");
        p.save(dir.join(&name))?;
        files.push(name);
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    manifest.record(dir, stem, &names, &cfg_hash, depends_on)?;
    manifest.save(dir)?;
    info!(
        "{stem}: test accuracy {} (epoch {}), written to {}",
        report.accuracy,
        outcome.best_epoch,
        dir.display()
    );
    Ok(())
}

fn evaluate_checkpoint(checkpoint: &Path, common: &Common) -> Result<()> {
    let model = ParamStore::load(checkpoint)?;
    let test = LabeledImageSet::load_dir(&common.data, Split::Test)
        .with_context(|| format!("loading test data from {}", common.data.display()))?;
    let mut report = evaluate(&model, &test, 32)?;
    let mc = model.config();
    report.config = BTreeMap::from([
        (
            "checkpoint".to_string(),
            checkpoint
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        ),
        ("checkpoint_sha256".to_string(), sha256_file(checkpoint)?),
        ("model".to_string(), mc.kind.name().to_string()),
        ("input_size".to_string(), mc.input_size.to_string()),
        ("channels".to_string(), mc.in_channels.to_string()),
        ("num_classes".to_string(), mc.num_classes.to_string()),
        ("hidden_fc".to_string(), mc.hidden_fc.to_string()),
        ("teacher_depth".to_string(), mc.teacher_depth.to_string()),
    ]);
    report.seed = test.seed;
    print!("{}", report.table());
    create_out(&common.out)?;
    let stem = checkpoint.file_stem().unwrap_or_default().to_string_lossy();
    let path: PathBuf = common.out.join(format!("{stem}.evaluation.json"));
    write_text(&path, &report.to_json())?;
    info!("wrote {}", path.display());
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let cfg = load_config(common, "seed")?;
    let (train_set, test_set) = load_data(&cfg, &common.data)?;
    let dir = &common.out;
    create_out(dir)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let cfg_hash = stage_config_hash(&cfg);
    let mut manifest = Manifest::load(dir)?;

    let reuse = |stage: &str| -> Result<Option<ParamStore>> {
        if manifest.is_current(dir, stage, &cfg_hash) {
            info!("reusing {stage} checkpoint from {}", dir.display());
            Ok(Some(ParamStore::load(dir.join(format!("{stage}.dfck")))?))
        } else {
            Ok(None)
        }
    };
    let teacher = reuse("teacher")?;
    let assistant = if teacher.is_some() { reuse("assistant")? } else { None };

    let runs_dir = dir.join("runs");
    create_out(&runs_dir)?;
    let total = 3 * cfg.repeats;
    let mut done = 0;
    let mut teacher_sha = match teacher {
        Some(_) => sha256_file(&dir.join("teacher.dfck"))?,
        None => String::new(),
    };
    let mut on_event = |event: AblationEvent<'_>| -> tadistill_core::Result<()> {
        let result: Result<()> = (|| {
            match event {
                AblationEvent::Stage(out) => {
                    let stem = out.params.kind().name();
                    let report = finish_report(out.report.clone(), &cfg, &[]);
                    let files = save_outcome(dir, stem, out, &report)?;
                    let names: Vec<&str> = files.iter().map(String::as_str).collect();
                    let deps = if out.params.kind() == ModelKind::Assistant {
                        BTreeMap::from([("teacher".to_string(), teacher_sha.clone())])
                    } else {
                        BTreeMap::new()
                    };
                    manifest.record(dir, stem, &names, &cfg_hash, deps)?;
                    manifest.save(dir)?;
                    if out.params.kind() == ModelKind::Teacher {
                        teacher_sha = sha256_file(&dir.join("teacher.dfck"))?;
                    }
                    info!("{stem}: test accuracy {}", report.accuracy);
                }
                AblationEvent::Run(record, out) => {
                    done += 1;
                    let report = finish_report(record.report.clone(), &cfg, &[("seed", record.seed.to_string())]);
                    let report = MetricsReport {
                        seed: record.seed,
                        ..report
                    };
                    let name = format!("{}.seed{}.json", record.regime.name(), record.seed);
                    write_text(&runs_dir.join(name), &report.to_json())?;
                    info!(
                        "run {done}/{total}: {} seed {} accuracy {} (epoch {})",
                        record.regime.name(),
                        record.seed,
                        report.accuracy,
                        out.best_epoch
                    );
                }
            }
            Ok(())
        })();
        result.map_err(|e| Error::Contract(format!("{e:#}")))
    };
    let table = run_ablation(
        &cfg.models(),
        &cfg.train_config(),
        cfg.repeats,
        &train_set,
        &test_set,
        teacher,
        assistant,
        &mut on_event,
    )?;
    write_text(&dir.join("ablation.csv"), &table.to_csv()?)?;
    write_json(
        &dir.join("ablation.json"),
        &serde_json::json!({ "rows": table.rows, "config": cfg.to_map() }),
    )?;
    for row in &table.rows {
        println!(
            "{:<26} mean {:.4} stddev {:.4} over seeds {:?}",
            row.regime.name(),
            row.mean_accuracy,
            row.stddev,
            row.seeds
        );
    }
    Ok(())
}
