//! Strategy sweeps and their summary tables.
//!
//! Output directory layout:
//!
//! ```text
//! summary.csv     one row per run
//! medians.csv     one row per (task set, strategy, frames) group
//! params.csv      parameter counts per model variant
//! summary.txt     both tables, aligned for reading
//! curves/*.csv    per-epoch metrics of every run
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use mtl_core::combiners::CombinerConfig;
use mtl_core::data::Dataset;
use mtl_core::network::{build_model, ParamCountReport};
use mtl_core::training::{metrics_csv, train, EpochMetrics, ExperimentConfig};
use mtl_core::Task;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    /// Settings shared by every run.
    #[serde(default)]
    pub base: ExperimentConfig,
    pub combiners: Vec<CombinerConfig>,
    /// Defaults to the base frame count.
    #[serde(default)]
    pub frames: Vec<usize>,
    /// Defaults to the base task list.
    #[serde(default)]
    pub task_sets: Vec<Vec<Task>>,
    pub seeds: Vec<u64>,
}

impl CompareSpec {
    pub fn validate(&self) -> mtl_core::Result<()> {
        let bad = |m: &str| Err(mtl_core::Error::Config(m.into()));
        if self.combiners.is_empty() {
            return bad("compare spec needs at least one combiner");
        }
        if self.seeds.is_empty() {
            return bad("compare spec needs at least one seed");
        }
        if self.frames.iter().any(|&f| f == 0 || f > 2) {
            return bad("frame counts must be 1 or 2");
        }
        if self.task_sets.iter().any(Vec::is_empty) {
            return bad("task sets must be non-empty");
        }
        Ok(())
    }

    fn frame_counts(&self) -> Vec<usize> {
        if self.frames.is_empty() {
            vec![self.base.num_frames]
        } else {
            self.frames.clone()
        }
    }

    fn task_lists(&self) -> Vec<Vec<Task>> {
        if self.task_sets.is_empty() {
            vec![self.base.tasks.clone()]
        } else {
            self.task_sets.clone()
        }
    }
}

/// Outcome of one sweep cell.
#[derive(Clone, Debug)]
pub struct RunRow {
    pub tasks: Vec<Task>,
    pub combiner: CombinerConfig,
    pub frames: usize,
    pub seed: u64,
    /// Final-epoch metrics, or the error that stopped the run.
    pub result: Result<EpochMetrics, String>,
    pub curve: Vec<EpochMetrics>,
}

fn tasks_label(tasks: &[Task]) -> String {
    tasks
        .iter()
        .map(|t| t.short())
        .collect::<Vec<_>>()
        .join("+")
}

fn group_label(tasks: &[Task]) -> String {
    format!("{}-task", tasks.len())
}

fn combiner_rank(c: &CombinerConfig) -> usize {
    CombinerConfig::NAMES
        .iter()
        .position(|n| *n == c.name())
        .unwrap_or(usize::MAX)
}

/// Display label; two-frame GLS runs are reported as `multinet++`.
pub fn method_label(c: &CombinerConfig, frames: usize) -> String {
    if matches!(c, CombinerConfig::Gls) && frames == 2 {
        "multinet++".into()
    } else {
        c.to_string()
    }
}

impl RunRow {
    pub fn run_id(&self) -> String {
        let raw = format!(
            "{}_{}_f{}_s{}",
            tasks_label(&self.tasks),
            self.combiner,
            self.frames,
            self.seed
        );
        raw.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                    c
                } else {
                    '-'
                }
            })
            .collect()
    }

    fn sort_key(&self) -> (usize, Vec<Task>, usize, String, usize, u64) {
        (
            self.tasks.len(),
            self.tasks.clone(),
            combiner_rank(&self.combiner),
            self.combiner.to_string(),
            self.frames,
            self.seed,
        )
    }

    fn accuracy(&self, task: Task) -> Option<f64> {
        self.result
            .as_ref()
            .ok()
            .and_then(|m| m.val_accuracy_of(task))
    }

    fn val_loss(&self, task: Task) -> Option<f64> {
        self.result.as_ref().ok().and_then(|m| m.val_loss_of(task))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_short(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Median of the values; mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(String::len)
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn params_rows(spec: &CompareSpec, num_classes: usize) -> Result<Vec<Vec<String>>> {
    let mut rows = vec![[
        "tasks",
        "frames",
        "aggregation",
        "encoder",
        "decoder_seg",
        "decoder_depth",
        "decoder_motion",
        "total",
    ]
    .map(String::from)
    .to_vec()];
    let mut lists = spec.task_lists();
    lists.sort_by_key(|t| (t.len(), t.clone()));
    let mut frames = spec.frame_counts();
    frames.sort();
    frames.dedup();
    for tasks in &lists {
        for &f in &frames {
            let cfg = ExperimentConfig {
                tasks: tasks.clone(),
                num_frames: f,
                ..spec.base.clone()
            };
            let r: ParamCountReport = build_model(cfg.model_config(num_classes))?.count_params();
            let dec = |t: Task| {
                r.decoder_params
                    .get(&t)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            };
            rows.push(vec![
                tasks_label(tasks),
                f.to_string(),
                format!("{:?}", spec.base.aggregation).to_lowercase(),
                r.encoder_params.to_string(),
                dec(Task::Segmentation),
                dec(Task::Depth),
                dec(Task::Motion),
                r.total.to_string(),
            ]);
        }
    }
    Ok(rows)
}

/// Runs every (task set, combiner, frames, seed) cell sequentially and
/// writes all outputs under `out`. Returns the aligned text summary.
pub fn run_compare(
    spec: &CompareSpec,
    dataset: &Dataset,
    out: &Path,
    mut on_run: impl FnMut(&RunRow),
) -> Result<String> {
    spec.validate()?;
    fs::create_dir_all(out.join("curves"))
        .map_err(|e| mtl_core::Error::Data(format!("{}: {e}", out.display())))?;

    let mut rows = Vec::new();
    for tasks in spec.task_lists() {
        for combiner in &spec.combiners {
            for frames in spec.frame_counts() {
                for &seed in &spec.seeds {
                    let cfg = ExperimentConfig {
                        tasks: tasks.clone(),
                        combiner: combiner.clone(),
                        num_frames: frames,
                        seed,
                        ..spec.base.clone()
                    };
                    let (result, curve) = match train(&cfg, dataset) {
                        Ok(o) => (
                            Ok(o.metrics.last().cloned().expect("epochs >= 1")),
                            o.metrics,
                        ),
                        Err(e) => (Err(e.to_string()), Vec::new()),
                    };
                    let row = RunRow {
                        tasks: tasks.clone(),
                        combiner: combiner.clone(),
                        frames,
                        seed,
                        result,
                        curve,
                    };
                    on_run(&row);
                    rows.push(row);
                }
            }
        }
    }
    rows.sort_by_key(RunRow::sort_key);

    for r in rows.iter().filter(|r| !r.curve.is_empty()) {
        let path = out.join("curves").join(format!("{}.csv", r.run_id()));
        fs::write(&path, metrics_csv(&r.curve)?)
            .map_err(|e| mtl_core::Error::Data(format!("{}: {e}", path.display())))?;
    }

    let mut summary = vec![[
        "group",
        "tasks",
        "method",
        "combiner",
        "frames",
        "seed",
        "status",
        "acc_seg",
        "acc_depth",
        "acc_motion",
        "val_loss_seg",
        "val_loss_depth",
        "val_loss_motion",
    ]
    .map(String::from)
    .to_vec()];
    let mut text_runs = vec![[
        "group", "tasks", "method", "frames", "seed", "seg", "depth", "motion", "status",
    ]
    .map(String::from)
    .to_vec()];
    for r in &rows {
        let status = match &r.result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("error: {e}"),
        };
        let mut rec = vec![
            group_label(&r.tasks),
            tasks_label(&r.tasks),
            method_label(&r.combiner, r.frames),
            r.combiner.to_string(),
            r.frames.to_string(),
            r.seed.to_string(),
            status.clone(),
        ];
        rec.extend(Task::ALL.iter().map(|&t| fmt_opt(r.accuracy(t))));
        rec.extend(Task::ALL.iter().map(|&t| fmt_opt(r.val_loss(t))));
        summary.push(rec);
        let mut line = vec![
            group_label(&r.tasks),
            tasks_label(&r.tasks),
            method_label(&r.combiner, r.frames),
            r.frames.to_string(),
            r.seed.to_string(),
        ];
        line.extend(Task::ALL.iter().map(|&t| fmt_short(r.accuracy(t))));
        line.push(status);
        text_runs.push(line);
    }
    write_csv(&out.join("summary.csv"), &summary)?;

    let mut medians = vec![[
        "group",
        "tasks",
        "method",
        "combiner",
        "frames",
        "runs",
        "acc_seg",
        "acc_depth",
        "acc_motion",
    ]
    .map(String::from)
    .to_vec()];
    let mut text_medians = vec![[
        "group", "tasks", "method", "frames", "runs", "seg", "depth", "motion",
    ]
    .map(String::from)
    .to_vec()];
    let mut i = 0;
    while i < rows.len() {
        let key = |r: &RunRow| (r.tasks.clone(), r.combiner.to_string(), r.frames);
        let j = rows[i..]
            .iter()
            .position(|r| key(r) != key(&rows[i]))
            .map_or(rows.len(), |k| i + k);
        let group = &rows[i..j];
        let ok = group.iter().filter(|r| r.result.is_ok()).count();
        let med = |t: Task| {
            let v: Vec<f64> = group.iter().filter_map(|r| r.accuracy(t)).collect();
            median(&v)
        };
        let first = &rows[i];
        let mut rec = vec![
            group_label(&first.tasks),
            tasks_label(&first.tasks),
            method_label(&first.combiner, first.frames),
            first.combiner.to_string(),
            first.frames.to_string(),
            ok.to_string(),
        ];
        rec.extend(Task::ALL.iter().map(|&t| fmt_opt(med(t))));
        medians.push(rec);
        let mut line = vec![
            group_label(&first.tasks),
            tasks_label(&first.tasks),
            method_label(&first.combiner, first.frames),
            first.frames.to_string(),
            ok.to_string(),
        ];
        line.extend(Task::ALL.iter().map(|&t| fmt_short(med(t))));
        text_medians.push(line);
        i = j;
    }
    write_csv(&out.join("medians.csv"), &medians)?;

    let params = params_rows(spec, dataset.num_classes)?;
    write_csv(&out.join("params.csv"), &params)?;

    let mut text = String::new();
    writeln!(text, "validation accuracy, final epoch")?;
    text.push_str(&aligned(&text_runs));
    writeln!(text, "\nmedians over seeds")?;
    text.push_str(&aligned(&text_medians));
    writeln!(text, "\nparameter counts")?;
    text.push_str(&aligned(&params));
    fs::write(out.join("summary.txt"), &text)
        .map_err(|e| mtl_core::Error::Data(format!("{}: {e}", out.display())))?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn labels() {
        assert_eq!(method_label(&CombinerConfig::Gls, 2), "multinet++");
        assert_eq!(method_label(&CombinerConfig::Gls, 1), "gls");
        assert_eq!(method_label(&CombinerConfig::Fls { m: 1 }, 2), "fls(m=1)");
    }

    #[test]
    fn spec_requires_combiners_and_seeds() {
        let spec: CompareSpec = serde_json::from_str(r#"{"combiners": [], "seeds": [1]}"#).unwrap();
        assert!(spec.validate().is_err());
        let spec: CompareSpec =
            serde_json::from_str(r#"{"combiners": [{"name": "gls"}], "seeds": []}"#).unwrap();
        assert!(spec.validate().is_err());
        let spec: CompareSpec = serde_json::from_str(
            r#"{"combiners": [{"name": "gls"}], "seeds": [0], "frames": [1, 2]}"#,
        )
        .unwrap();
        assert!(spec.validate().is_ok());
        assert_eq!(spec.task_lists(), vec![Task::ALL.to_vec()]);
    }

    #[test]
    fn aligned_pads_columns() {
        let rows = vec![
            vec!["a".to_string(), "bbb".to_string()],
            vec!["cc".to_string(), "d".to_string()],
        ];
        assert_eq!(aligned(&rows), "a   bbb\ncc  d\n");
    }
}
