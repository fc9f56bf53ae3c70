//! One-axis parameter sweeps producing the table shape of the experiment
//! grid: a row per value with mean(std) of best accuracy and rounds to
//! target over the seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedsup_core::metrics::{MeanStd, RunSummary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiment::{
    create_dir, run_seed, write_file, write_json, RunOptions, RunReport, CONFIG_FILE, SUMMARY_FILE,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    name: Option<String>,
    axis: String,
    values: Vec<Value>,
    /// Inline base config.
    base: Option<Table>,
    /// Or a path to one, relative to the sweep file.
    base_config: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub name: String,
    pub axis: String,
    pub values: Vec<Value>,
    pub base: ExperimentConfig,
    /// The config of each value, in `values` order.
    pub cells: Vec<ExperimentConfig>,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl SweepSpec {
    pub fn new(name: String, base: ExperimentConfig, axis: &str, values: Vec<Value>) -> Result<Self> {
        let base_table = base.to_table();
        let known = base_table.contains_key(axis) || ["dataset_path", "data_seed", "output_dir"].contains(&axis);
        if !known || axis == "name" {
            return Err(CliError::Config(format!(
                "invalid `axis`: `{axis}` is not a sweepable config key"
            )));
        }
        if values.is_empty() {
            return Err(CliError::Config("invalid `values`: empty".into()));
        }
        let mut cells = Vec::with_capacity(values.len());
        let mut labels: Vec<String> = Vec::new();
        for v in &values {
            let label: String = format!("{axis}={}", value_label(v))
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || "-_.=".contains(c) {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            if labels.contains(&label) {
                return Err(CliError::Config(format!(
                    "invalid `values`: {} appears twice",
                    value_label(v)
                )));
            }
            let mut table = base_table.clone();
            table.insert(axis.to_string(), v.clone());
            table.insert("name".into(), Value::String(label.clone()));
            let cell = ExperimentConfig::from_table(table, None)
                .map_err(|e| CliError::Config(format!("invalid value {v} for `{axis}`: {e}")))?;
            cell.validate()
                .map_err(|e| CliError::Config(format!("value {v} for `{axis}`: {e}")))?;
            labels.push(label);
            cells.push(cell);
        }
        Ok(Self {
            name,
            axis: axis.to_string(),
            values,
            base,
            cells,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: SweepFile =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        let dir = path.parent();
        let base = match (file.base, file.base_config) {
            (Some(table), None) => ExperimentConfig::from_table(table, dir)?,
            (None, Some(rel)) => {
                let p = dir.map_or(rel.clone(), |d| d.join(&rel));
                ExperimentConfig::load(&p)?
            }
            (None, None) => ExperimentConfig::default(),
            (Some(_), Some(_)) => return Err(CliError::Config("give either `base` or `base_config`, not both".into())),
        };
        let name = file.name.unwrap_or_else(|| format!("sweep-{}", file.axis));
        Self::new(name, base, &file.axis, file.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: Value,
    pub cells: usize,
    pub failed: usize,
    pub reached: usize,
    pub best_accuracy: Option<MeanStd>,
    pub rounds_to_target: Option<MeanStd>,
    pub median_rounds: Option<f64>,
    pub upload_ratio: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub axis: String,
    pub target: f64,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunReport>,
}

pub const TABLE_HEADER: &str = "value,cells,failed,reached,best_accuracy_mean,best_accuracy_std,rounds_to_target_mean,rounds_to_target_std,median_rounds,upload_ratio_mean,upload_ratio_std";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl SweepReport {
    pub fn table_csv(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                value_label(&r.value),
                r.cells,
                r.failed,
                r.reached,
                opt(r.best_accuracy.map(|m| m.mean)),
                opt(r.best_accuracy.map(|m| m.std)),
                opt(r.rounds_to_target.map(|m| m.mean)),
                opt(r.rounds_to_target.map(|m| m.std)),
                opt(r.median_rounds),
                opt(r.upload_ratio.map(|m| m.mean)),
                opt(r.upload_ratio.map(|m| m.std)),
            );
        }
        out
    }
}

/// Runs every (value, seed) cell into `<out_root>/<sweep name>/<axis>=<value>/`.
/// Failed cells are recorded in the table and the sweep carries on.
pub fn run_sweep(spec: &SweepSpec, out_root: &Path, opts: &RunOptions) -> Result<SweepReport> {
    let sweep_dir = out_root.join(&spec.name);
    create_dir(&sweep_dir)?;
    for cell in &spec.cells {
        let dir = sweep_dir.join(&cell.name);
        create_dir(&dir)?;
        write_file(&dir.join(CONFIG_FILE), cell.to_toml_string())?;
    }
    let jobs: Vec<(usize, u64)> = spec
        .cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, u64, std::result::Result<RunSummary, String>)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let cell = &spec.cells[i];
            let dir = sweep_dir.join(&cell.name);
            let r = run_seed(cell, seed, &dir, opts)
                .map(|(_, s)| s)
                .map_err(|e| e.to_string());
            (i, seed, r)
        })
        .collect();

    let mut runs = Vec::with_capacity(spec.cells.len());
    let mut rows = Vec::with_capacity(spec.cells.len());
    for (i, cell) in spec.cells.iter().enumerate() {
        let cell_results: Vec<(u64, std::result::Result<RunSummary, String>)> = results
            .iter()
            .filter(|r| r.0 == i)
            .map(|r| (r.1, r.2.clone()))
            .collect();
        let report = RunReport::new(cell, cell_results);
        write_json(&sweep_dir.join(&cell.name).join(SUMMARY_FILE), &report)?;
        rows.push(SweepRow {
            value: spec.values[i].clone(),
            cells: cell.seeds.len(),
            failed: report.failed.len(),
            reached: report.aggregate.reached,
            best_accuracy: report.aggregate.best_accuracy,
            rounds_to_target: report.aggregate.rounds_to_target,
            median_rounds: report.aggregate.median_rounds,
            upload_ratio: report.aggregate.upload_ratio,
        });
        runs.push(report);
    }
    let report = SweepReport {
        name: spec.name.clone(),
        axis: spec.axis.clone(),
        target: spec.base.target_accuracy,
        rows,
        runs,
    };
    write_file(&sweep_dir.join("table.csv"), report.table_csv())?;
    write_json(&sweep_dir.join("table.json"), &report)?;
    Ok(report)
}
