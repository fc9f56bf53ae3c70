//! Comparing completed runs and emitting plot-ready series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedsup_core::metrics::{compare_runs, Comparison};
use serde::{Deserialize, Serialize};

use crate::config::{diff_keys, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::experiment::{
    create_dir, read_round_log, seed_csv_path, write_file, write_json, RunReport, CONFIG_FILE, SUMMARY_FILE,
};

/// Keys two compared runs may differ in.
pub const COMPARABLE_KEYS: &[&str] = &["name", "aggregator", "epsilon", "passes", "output_dir"];

#[derive(Debug, Clone)]
pub struct CompletedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub report: RunReport,
}

impl CompletedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let path = dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let report = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            report,
        })
    }

    /// Per-round mean accuracy and mean uploaded images over the seeds
    /// that ran that round.
    pub fn mean_series(&self) -> Result<Vec<(f64, f64)>> {
        let logs = self
            .report
            .seeds
            .iter()
            .map(|s| read_round_log(&seed_csv_path(&self.dir, s.seed)))
            .collect::<Result<Vec<_>>>()?;
        let rounds = logs.iter().map(Vec::len).max().unwrap_or(0);
        Ok((0..rounds)
            .map(|t| {
                let rows: Vec<_> = logs.iter().filter_map(|l| l.get(t)).collect();
                let n = rows.len() as f64;
                (
                    rows.iter().map(|r| r.1).sum::<f64>() / n,
                    rows.iter().map(|r| r.2 as f64).sum::<f64>() / n,
                )
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub candidate: String,
    pub baseline: String,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub runs: Vec<String>,
    /// The first run against each of the others.
    pub comparisons: Vec<PairComparison>,
}

fn check_comparable(a: &CompletedRun, b: &CompletedRun) -> Result<()> {
    let diffs: Vec<_> = diff_keys(&a.config, &b.config)
        .into_iter()
        .filter(|d| !COMPARABLE_KEYS.contains(&d.0.as_str()))
        .collect();
    if diffs.is_empty() {
        return Ok(());
    }
    let mut msg = format!(
        "runs {} and {} differ beyond {}:",
        a.dir.display(),
        b.dir.display(),
        COMPARABLE_KEYS[1..4].join("/")
    );
    for (k, va, vb) in diffs {
        let _ = write!(msg, "\n  {k}: {va} != {vb}");
    }
    Err(CliError::Config(msg))
}

fn series_csv(names: &[String], series: &[Vec<(f64, f64)>], pick: impl Fn(&(f64, f64)) -> f64) -> String {
    let mut out = String::from("round");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let rounds = series.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..rounds {
        out.push_str(&t.to_string());
        for s in series {
            out.push(',');
            if let Some(v) = s.get(t) {
                out.push_str(&pick(v).to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Compares the first run against each of the others and writes
/// `comparison.json`, `accuracy_vs_round.csv` and `uploads_vs_round.csv`
/// into `<out_root>/<name>/`.
pub fn run_compare(run_dirs: &[PathBuf], out_root: &Path, name: Option<&str>) -> Result<CompareReport> {
    if run_dirs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two run directories".into()));
    }
    let runs = run_dirs
        .iter()
        .map(|d| CompletedRun::load(d))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = runs.iter().map(|r| r.report.name.clone()).collect();
    let mut comparisons = Vec::new();
    for other in &runs[1..] {
        check_comparable(&runs[0], other)?;
        let comparison = compare_runs(&runs[0].report.summaries(), &other.report.summaries())
            .map_err(|e| CliError::Config(e.to_string()))?;
        comparisons.push(PairComparison {
            candidate: runs[0].report.name.clone(),
            baseline: other.report.name.clone(),
            comparison,
        });
    }
    let series = runs.iter().map(CompletedRun::mean_series).collect::<Result<Vec<_>>>()?;
    let dir_name = name.map_or_else(|| format!("compare-{}", names.join("-vs-")), str::to_string);
    let dir = out_root.join(dir_name);
    create_dir(&dir)?;
    let report = CompareReport {
        runs: names.clone(),
        comparisons,
    };
    write_json(&dir.join("comparison.json"), &report)?;
    write_file(&dir.join("accuracy_vs_round.csv"), series_csv(&names, &series, |v| v.0))?;
    write_file(&dir.join("uploads_vs_round.csv"), series_csv(&names, &series, |v| v.1))?;
    Ok(report)
}
