use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tadistill_core::data::{LabeledImageSet, Split};
use tadistill_core::train::MetricsReport;

const TINY: &str = "\
# small enough to train every stage in seconds
num_classes = 3
per_class_train = 4
per_class_test = 2
image_size = 16
hidden_fc = 8
epochs = 1
batch_size = 4
learning_rate = 0.01
";

fn tadistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tadistill"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn gen(config: &Path, out: &Path) {
    ok(&tadistill(&["gen-data", "--config", p(config), "--out", p(out)]));
}

#[test]
fn gen_data_defaults_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&tadistill(&["gen-data", "--out", p(&out)]));
    let train = LabeledImageSet::load_dir(&out, Split::Train).unwrap();
    let test = LabeledImageSet::load_dir(&out, Split::Test).unwrap();
    assert_eq!((train.len(), test.len(), train.num_classes()), (2000, 500, 10));

    let again = tmp.path().join("again");
    ok(&tadistill(&["gen-data", "--out", p(&again)]));
    for f in [
        "train.images.dftn",
        "train.labels.dflb",
        "test.images.dftn",
        "test.labels.dflb",
        "manifest.json",
    ] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_respects_class_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("data");
    gen(&cfg, &out);
    let train = LabeledImageSet::load_dir(&out, Split::Train).unwrap();
    assert!(train.labels.iter().all(|&y| y < 3));
    assert_eq!(train.class_counts(), vec![4, 4, 4]);
}

#[test]
fn invalid_config_exits_2_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "num_classes = 3\nwidth_multiplier = 2\n");
    let out = tmp.path().join("data");
    let res = tadistill(&["gen-data", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown key"));
    assert!(!out.exists());

    let res = tadistill(&[
        "gen-data",
        "--config",
        p(&tmp.path().join("missing.cfg")),
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn student_without_assistant_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    gen(&cfg, &data);
    let out = tmp.path().join("run");
    let res = tadistill(&[
        "train",
        "student",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("requires assistant checkpoint"));
}

fn pipeline(cfg: &Path, data: &Path, out: &Path) {
    for stage in ["teacher", "assistant", "student"] {
        ok(&tadistill(&[
            "train",
            stage,
            "--config",
            p(cfg),
            "--data",
            p(data),
            "--out",
            p(out),
        ]));
    }
}

#[test]
fn three_stage_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    gen(&cfg, &data);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    pipeline(&cfg, &data, &a);
    pipeline(&cfg, &data, &b);
    for f in [
        "teacher.dfck",
        "teacher.report.json",
        "teacher.soft.dfsl",
        "assistant.dfck",
        "assistant.report.json",
        "assistant.soft.dfsl",
        "assistant.features.dftn",
        "student.dfck",
        "student.projection.dftn",
        "student.report.json",
        "manifest.json",
    ] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let report = MetricsReport::from_json(&fs::read_to_string(a.join("student.report.json")).unwrap()).unwrap();
    assert_eq!(report.config["tau"], "4");
    assert_eq!(report.config["alpha"], "0.4");
    assert_eq!(report.config["guide"], "assistant");
    assert_eq!(report.wall_time_s, None);
}

#[test]
fn evaluate_prints_the_json_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    gen(&cfg, &data);
    let run = tmp.path().join("run");
    ok(&tadistill(&[
        "train",
        "teacher",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
    ]));
    let ckpt = run.join("teacher.dfck");
    let eval_dir = tmp.path().join("eval");
    let first = tadistill(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&eval_dir),
    ]);
    ok(&first);
    let second = tadistill(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&eval_dir),
    ]);
    assert_eq!(first.stdout, second.stdout);

    let stdout = String::from_utf8(first.stdout).unwrap();
    let header: Vec<&str> = stdout.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Script", "Precision", "Recall", "F-Score"]);
    let report =
        MetricsReport::from_json(&fs::read_to_string(eval_dir.join("teacher.evaluation.json")).unwrap()).unwrap();
    for (line, class) in stdout.lines().skip(1).zip(&report.per_class) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[0], class.name);
        let nums: Vec<f64> = cols[1..4].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(nums, [class.precision, class.recall, class.f_score]);
    }
    assert!(stdout.contains(&format!("Accuracy {}", report.accuracy)));
}

#[test]
fn ablate_emits_three_rows_and_every_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    gen(&cfg, &data);
    let out = tmp.path().join("ablate");
    ok(&tadistill(&[
        "ablate",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--repeats",
        "2",
    ]));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "teacher,assistant,mean_accuracy,stddev,seeds");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("none,none,"));
    assert!(lines[2].contains(",none,"));
    assert!(lines[3].contains(",assistant,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",0;1")));
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 6);

    let before = fs::read(out.join("teacher.dfck")).unwrap();
    ok(&tadistill(&[
        "ablate",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--repeats",
        "2",
    ]));
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap(), csv);
    assert_eq!(fs::read(out.join("teacher.dfck")).unwrap(), before);
}
