//! Running one experiment config: every seed, its CSV log and a summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedsup_core::data::{generate_blink_dataset, load_dataset, partition_unbalanced};
use fedsup_core::features::{feature_image, GaborBank};
use fedsup_core::federation::{
    cloud_execute, mean_trajectory, run_centralized_sgd, run_standalone_sgd, FederatedSetup,
};
use fedsup_core::metrics::{aggregate_seeds, summarize, MetricsSink, RoundMetrics, RunSummary, SeedAggregate};
use fedsup_core::nn::build_blink_net_with;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Result};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write the cloud model every this many rounds (federated runs only).
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub method: Method,
    pub target: f64,
    pub seeds: Vec<SeedSummary>,
    /// Seeds whose run failed, with the error.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<(u64, String)>,
    pub aggregate: SeedAggregate,
}

impl RunReport {
    pub fn new(cfg: &ExperimentConfig, results: Vec<(u64, std::result::Result<RunSummary, String>)>) -> Self {
        let mut seeds = Vec::new();
        let mut failed = Vec::new();
        for (seed, r) in results {
            match r {
                Ok(summary) => seeds.push(SeedSummary { seed, summary }),
                Err(e) => failed.push((seed, e)),
            }
        }
        let summaries: Vec<RunSummary> = seeds.iter().map(|s| s.summary.clone()).collect();
        let mut aggregate = aggregate_seeds(&summaries);
        aggregate.target = cfg.target_accuracy;
        Self {
            name: cfg.name.clone(),
            method: cfg.method,
            target: cfg.target_accuracy,
            seeds,
            failed,
            aggregate,
        }
    }

    pub fn summaries(&self) -> Vec<RunSummary> {
        self.seeds.iter().map(|s| s.summary.clone()).collect()
    }
}

/// Dataset, holdout split, client partition and network for one seed.
pub fn build_setup(cfg: &ExperimentConfig, seed: u64) -> Result<FederatedSetup> {
    let dataset = match &cfg.dataset_path {
        Some(path) => load_dataset(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
        None => generate_blink_dataset(&cfg.synthetic_spec(seed))?,
    };
    let (train, eval) = dataset.split_holdout(cfg.holdout_fraction, seed)?;
    let partition = partition_unbalanced(&train, &cfg.partition_spec(seed))?;
    let spec = build_blink_net_with(train.image_shape(), cfg.dropout())?;
    let features = if cfg.pretrain_rounds > 0 {
        let bank = GaborBank::default();
        Some(train.map_images(|img| feature_image(img, &bank))?)
    } else {
        None
    };
    Ok(FederatedSetup {
        spec,
        train,
        clients: partition.parts,
        eval,
        features,
    })
}

pub fn seed_csv_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}.csv"))
}

/// Runs one seed, streaming its round log to `seed-<seed>.csv` in
/// `run_dir`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<(Vec<RoundMetrics>, RunSummary)> {
    let setup = build_setup(cfg, seed)?;
    let fed = cfg.federation();
    let csv_path = seed_csv_path(run_dir, seed);
    let file = File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let mut sink = MetricsSink::with_csv(Box::new(BufWriter::new(file)))?;
    match cfg.method {
        Method::Federated => {
            let ckpt_dir = run_dir.join("checkpoints").join(format!("seed-{seed}"));
            let every = opts.checkpoint_every.filter(|&n| n > 0);
            cloud_execute(&fed, &setup, seed, &mut sink, &mut |m, params| {
                if let Some(n) = every {
                    if (m.round + 1) % n == 0 {
                        fs::create_dir_all(&ckpt_dir)?;
                        let path = ckpt_dir.join(format!("round-{:04}.fsup", m.round));
                        fs::write(&path, params.to_bytes())?;
                    }
                }
                Ok(())
            })?;
        }
        Method::Centralized => {
            run_centralized_sgd(&fed, &setup, seed, &mut sink)?;
        }
        Method::Standalone => {
            let per_edge = run_standalone_sgd(&fed, &setup, seed)?;
            for m in mean_trajectory(&per_edge) {
                sink.record_round(m)?;
            }
        }
    }
    let rounds = sink.into_rounds();
    let summary = summarize(&rounds, cfg.target_accuracy);
    Ok((rounds, summary))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(contents.as_ref())
        .and_then(|_| f.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

/// Runs every seed of `cfg` into `<out_root>/<name>/` and writes the
/// resolved config and `summary.json` next to the per-seed logs.
///
/// A failing seed does not stop the others; the first failure is returned
/// after the summary of the rest has been written.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let run_dir = out_root.join(&cfg.name);
    create_dir(&run_dir)?;
    write_file(&run_dir.join(CONFIG_FILE), cfg.to_toml_string())?;
    let results: Vec<(u64, Result<RunSummary>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, seed, &run_dir, opts).map(|(_, s)| s)))
        .collect();
    let mut first_err = None;
    let results = results
        .into_iter()
        .map(|(seed, r)| {
            (
                seed,
                r.map_err(|e| {
                    let msg = e.to_string();
                    first_err.get_or_insert(e);
                    msg
                }),
            )
        })
        .collect();
    let report = RunReport::new(cfg, results);
    write_json(&run_dir.join(SUMMARY_FILE), &report)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Reads a per-seed CSV log back into `(round, accuracy, uploads_images)`.
pub fn read_round_log(path: &Path) -> Result<Vec<(usize, f64, u64)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parsed = (|| {
            Some((
                cols.first()?.parse().ok()?,
                cols.get(1)?.parse().ok()?,
                cols.get(2)?.parse().ok()?,
            ))
        })();
        rows.push(parsed.ok_or_else(|| CliError::Runtime(format!("{}: malformed line {}", path.display(), i + 1)))?);
    }
    Ok(rows)
}
