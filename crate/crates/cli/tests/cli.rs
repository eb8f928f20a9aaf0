use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtl_cli::exit;
use mtl_core::network::load_checkpoint;
use tempfile::TempDir;

fn mtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtl"))
        .args(args)
        .output()
        .expect("mtl runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let scene = serde_json::json!({
            "height": 16, "width": 24, "min_objects": 1, "max_objects": 3,
            "min_size": 2, "max_size": 5, "max_displacement": 2,
        });
        fs::write(dir.path().join("scene.json"), scene.to_string()).unwrap();
        let exp = serde_json::json!({
            "encoder": {"base_channels": 2, "kernel": 3},
            "decoder_width": 4,
            "epochs": 2,
            "batch_size": 4,
            "combiner": {"name": "gls"},
        });
        fs::write(dir.path().join("exp.json"), exp.to_string()).unwrap();
        let f = Fixture { dir };
        ok(mtl(&[
            "generate",
            "--config",
            s(&f.path("scene.json")),
            "--count",
            "10",
            "--seed",
            "3",
            "--quiet",
            "--out",
            s(&f.path("data")),
        ]));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (exp, data, out) = (self.path("exp.json"), self.path("data"), self.path(out));
        let mut args = vec![
            "train",
            "--config",
            s(&exp),
            "--dataset",
            s(&data),
            "--quiet",
        ];
        args.extend(["--out", s(&out)]);
        args.extend(extra);
        mtl(&args)
    }
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (headers, rows)
}

fn column<'a>(headers: &[String], row: &'a [String], name: &str) -> &'a str {
    let i = headers
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    &row[i]
}

#[test]
fn generate_reports_summary_and_is_byte_identical() {
    let f = Fixture::new();
    let mut outs = Vec::new();
    for d in ["a", "b"] {
        let o = ok(mtl(&[
            "generate",
            "--config",
            s(&f.path("scene.json")),
            "--count",
            "6",
            "--seed",
            "7",
            "--png",
            "--out",
            s(&f.path(d)),
        ]));
        outs.push(stdout(&o));
    }
    assert!(
        outs[0].contains("wrote 6 samples (16x24, 4 classes)"),
        "{}",
        outs[0]
    );
    assert_eq!(
        outs[0].replace(s(&f.path("a")), ""),
        outs[1].replace(s(&f.path("b")), "")
    );
    let mut names: Vec<_> = fs::read_dir(f.path("a/samples"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6 * 4);
    for n in &names {
        let a = fs::read(f.path("a/samples").join(n)).unwrap();
        let b = fs::read(f.path("b/samples").join(n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
    assert_eq!(
        fs::read(f.path("a/index.json")).unwrap(),
        fs::read(f.path("b/index.json")).unwrap()
    );
}

#[test]
fn static_scenes_report_no_motion() {
    let f = Fixture::new();
    let o = ok(mtl(&[
        "generate",
        "--config",
        s(&f.path("scene.json")),
        "--count",
        "5",
        "--moving-fraction",
        "0",
        "--out",
        s(&f.path("still")),
    ]));
    assert!(
        stdout(&o).contains("motion-positive pixels: 0\n"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn missing_out_is_a_usage_error() {
    let o = mtl(&["generate", "--count", "3"]);
    assert_eq!(o.status.code(), Some(exit::USAGE));
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));

    let o = mtl(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(exit::USAGE));
    assert_eq!(mtl(&["--help"]).status.code(), Some(exit::OK));
}

#[test]
fn train_writes_validation_loss_columns_and_reruns_identically() {
    let f = Fixture::new();
    ok(f.train("run_a", &[]));
    ok(f.train("run_b", &[]));
    let (headers, rows) = csv_rows(&f.path("run_a/metrics.csv"));
    for t in ["seg", "depth", "motion"] {
        assert!(headers.contains(&format!("val_loss_{t}")), "{headers:?}");
    }
    assert_eq!(rows.len(), 2);
    assert_eq!(
        fs::read(f.path("run_a/metrics.csv")).unwrap(),
        fs::read(f.path("run_b/metrics.csv")).unwrap()
    );
    let a = load_checkpoint(&f.path("run_a/model.ckpt")).unwrap();
    let b = load_checkpoint(&f.path("run_b/model.ckpt")).unwrap();
    assert_eq!(a.model, b.model);
    for name in ["timing.csv", "config.json"] {
        assert!(f.path("run_a").join(name).exists(), "{name}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let f = Fixture::new();
    ok(f.train(
        "run",
        &["--epochs", "1", "--tasks", "segmentation", "--frames", "1"],
    ));
    let (headers, rows) = csv_rows(&f.path("run/metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert!(headers.contains(&"val_acc_seg".to_string()));
    assert!(!headers.contains(&"val_acc_depth".to_string()));
}

#[test]
fn unknown_combiner_lists_valid_names() {
    let f = Fixture::new();
    let o = f.train("run", &["--combiner", "harmonic"]);
    assert_eq!(o.status.code(), Some(exit::USAGE));
    let err = stderr(&o);
    for name in ["equal", "weighted", "gls", "fls", "uncertainty", "dwa"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn missing_dataset_is_a_data_error() {
    let f = Fixture::new();
    let o = mtl(&[
        "train",
        "--config",
        s(&f.path("exp.json")),
        "--dataset",
        s(&f.path("nowhere")),
        "--out",
        s(&f.path("run")),
    ]);
    assert_eq!(o.status.code(), Some(exit::DATA), "{}", stderr(&o));
    assert!(stderr(&o).contains("no index"), "{}", stderr(&o));
}

#[test]
fn diverging_training_aborts_with_numeric_exit_code() {
    let f = Fixture::new();
    let o = f.train(
        "run",
        &["--combiner", "equal", "--lr", "1e300", "--epochs", "2"],
    );
    assert_eq!(o.status.code(), Some(exit::NUMERIC), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(
        ["segmentation", "depth", "motion"]
            .iter()
            .any(|t| err.contains(t)),
        "{err}"
    );
}

#[test]
fn eval_reproduces_final_validation_metrics() {
    let f = Fixture::new();
    ok(f.train("run", &[]));
    ok(mtl(&[
        "eval",
        "--checkpoint",
        s(&f.path("run/model.ckpt")),
        "--quiet",
        "--out",
        s(&f.path("eval")),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("eval/eval.json")).unwrap()).unwrap();
    let (headers, rows) = csv_rows(&f.path("run/metrics.csv"));
    let last = rows.last().unwrap();
    for (task, short) in [
        ("segmentation", "seg"),
        ("depth", "depth"),
        ("motion", "motion"),
    ] {
        let acc: f64 = column(&headers, last, &format!("val_acc_{short}"))
            .parse()
            .unwrap();
        let loss: f64 = column(&headers, last, &format!("val_loss_{short}"))
            .parse()
            .unwrap();
        assert_eq!(report[task]["accuracy"].as_f64().unwrap(), acc, "{task}");
        assert_eq!(report[task]["loss"].as_f64().unwrap(), loss, "{task}");
    }
}

#[test]
fn single_cell_compare_matches_train() {
    let f = Fixture::new();
    ok(f.train("run", &["--seed", "9"]));
    let spec = serde_json::json!({
        "base": serde_json::from_str::<serde_json::Value>(
            &fs::read_to_string(f.path("exp.json")).unwrap()).unwrap(),
        "combiners": [{"name": "gls"}],
        "seeds": [9],
    });
    fs::write(f.path("cmp.json"), spec.to_string()).unwrap();
    ok(mtl(&[
        "compare",
        "--config",
        s(&f.path("cmp.json")),
        "--dataset",
        s(&f.path("data")),
        "--quiet",
        "--out",
        s(&f.path("cmp")),
    ]));
    let (th, trows) = csv_rows(&f.path("run/metrics.csv"));
    let (sh, srows) = csv_rows(&f.path("cmp/summary.csv"));
    assert_eq!(srows.len(), 1);
    let last = trows.last().unwrap();
    for short in ["seg", "depth", "motion"] {
        let train_acc: f64 = column(&th, last, &format!("val_acc_{short}"))
            .parse()
            .unwrap();
        let cmp_acc: f64 = column(&sh, &srows[0], &format!("acc_{short}"))
            .parse()
            .unwrap();
        assert_eq!(train_acc, cmp_acc, "{short}");
        let train_loss: f64 = column(&th, last, &format!("val_loss_{short}"))
            .parse()
            .unwrap();
        let cmp_loss: f64 = column(&sh, &srows[0], &format!("val_loss_{short}"))
            .parse()
            .unwrap();
        assert_eq!(train_loss, cmp_loss, "{short}");
    }
    assert_eq!(column(&sh, &srows[0], "method"), "multinet++");
    assert_eq!(
        fs::read(f.path("run/metrics.csv")).unwrap(),
        fs::read(
            f.path("cmp/curves")
                .join(format!("{}.csv", "seg-depth-motion_gls_f2_s9"))
        )
        .unwrap()
    );
}

#[test]
fn compare_reports_parameter_accounting() {
    let f = Fixture::new();
    let spec = serde_json::json!({
        "base": {
            "encoder": {"base_channels": 2, "kernel": 3},
            "decoder_width": 4,
            "epochs": 1,
            "batch_size": 4,
        },
        "combiners": [{"name": "equal"}, {"name": "gls"}],
        "frames": [1, 2],
        "task_sets": [["segmentation"], ["segmentation", "depth", "motion"]],
        "seeds": [0],
    });
    fs::write(f.path("cmp.json"), spec.to_string()).unwrap();
    let o = ok(mtl(&[
        "compare",
        "--config",
        s(&f.path("cmp.json")),
        "--dataset",
        s(&f.path("data")),
        "--out",
        s(&f.path("cmp")),
    ]));
    assert!(stdout(&o).contains("parameter counts"), "{}", stdout(&o));

    let (h, rows) = csv_rows(&f.path("cmp/params.csv"));
    assert_eq!(rows.len(), 4);
    let encoder: Vec<&str> = rows.iter().map(|r| column(&h, r, "encoder")).collect();
    assert!(encoder.iter().all(|e| *e == encoder[0]), "{encoder:?}");
    let total = |tasks: &str, frames: &str| -> usize {
        let r = rows
            .iter()
            .find(|r| column(&h, r, "tasks") == tasks && column(&h, r, "frames") == frames)
            .unwrap();
        column(&h, r, "total").parse().unwrap()
    };
    // score convs read (2 + 4 + 8) aggregated channels per stream, width 4
    let growth_per_head = 4 * (2 + 4 + 8);
    assert_eq!(total("seg", "2") - total("seg", "1"), growth_per_head);
    assert_eq!(
        total("seg+depth+motion", "2") - total("seg+depth+motion", "1"),
        3 * growth_per_head
    );

    let (sh, srows) = csv_rows(&f.path("cmp/summary.csv"));
    assert_eq!(srows.len(), 8);
    let groups: Vec<&str> = srows.iter().map(|r| column(&sh, r, "group")).collect();
    assert_eq!(&groups[..4], ["1-task"; 4]);
    assert_eq!(&groups[4..], ["3-task"; 4]);
    let (_, medians) = csv_rows(&f.path("cmp/medians.csv"));
    assert_eq!(medians.len(), 8);
}
