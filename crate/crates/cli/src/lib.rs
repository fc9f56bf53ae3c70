//! Command-line experiment runner for the fedsup simulator.
//!
//! ```text
//! fedsup generate --samples 2000 --seed 7
//! fedsup run --config paper-default --seed 1
//! fedsup sweep --config eps.toml --jobs 4
//! fedsup compare runs/uwaa runs/fedavg
//! ```
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for usage or config
//! errors.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod sweep;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedsup_core::data::{generate_blink_dataset, write_dataset, SyntheticBlinkSpec};
use sha2::{Digest, Sha256};

pub use config::{preset, ExperimentConfig, Method};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, RunOptions, RunReport};

pub const OUT_ENV: &str = "FEDSUP_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "fedsup",
    version,
    about = "Uncertainty-aware client-edge-cloud federated learning simulator"
)]
pub struct Cli {
    /// Output root; runs land in <out>/<run-name>/. Defaults to the
    /// config's output_dir, then $FEDSUP_OUT, then ./runs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for seeds and sweep cells (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic eye-blink dataset and print its SHA-256.
    Generate(GenerateArgs),
    /// Run one experiment config for each of its seeds.
    Run(RunArgs),
    /// Run a one-axis parameter sweep.
    Sweep(RunArgs),
    /// Compare completed runs and write plot data.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image size as `N` or `HxW`.
    #[arg(long, default_value = "24", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = ExperimentConfig::default().noise_std)]
    pub noise: f64,
    #[arg(long, default_value_t = ExperimentConfig::default().jitter_px)]
    pub jitter: usize,
    /// Output file (default: <out>/data/blink-n<samples>-s<seed>.fsds).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file, or the name of a preset (paper-default, desk).
    #[arg(long)]
    pub config: String,
    /// Run this seed only, replacing the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save the cloud model every N rounds (federated runs).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories; the first is compared against each of the others.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Name of the output directory (default: compare-<a>-vs-<b>).
    #[arg(long)]
    pub name: Option<String>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn out_root(cli: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    cli.or(configured)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_config(arg: &str) -> Result<ExperimentConfig> {
    let path = Path::new(arg);
    if !path.exists() && config::PRESETS.contains(&arg) {
        preset(arg)
    } else {
        ExperimentConfig::load(path)
    }
}

fn cmd_generate(args: &GenerateArgs, out: Option<&Path>) -> Result<()> {
    let spec = SyntheticBlinkSpec {
        image_size: args.size,
        num_samples: args.samples,
        noise_std: args.noise as f32,
        jitter_px: args.jitter,
        seed: args.seed,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be >= 1".into()));
    }
    let path = args.output.clone().unwrap_or_else(|| {
        out_root(out, None)
            .join("data")
            .join(format!("blink-n{}-s{}.fsds", args.samples, args.seed))
    });
    let dataset = generate_blink_dataset(&spec)?;
    let mut bytes = Vec::new();
    write_dataset(&dataset, &mut bytes)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        experiment::create_dir(parent)?;
    }
    experiment::write_file(&path, &bytes)?;
    println!("{}  {}", hex::encode(Sha256::digest(&bytes)), path.display());
    Ok(())
}

fn print_report(report: &RunReport) {
    for s in &report.seeds {
        let r = &s.summary;
        let reached = r
            .rounds_to_target
            .map_or_else(|| "not reached".to_string(), |t| format!("round {t}"));
        println!(
            "seed {}: best accuracy {:.4}, target {:.2} {}, upload ratio {:.4}",
            s.seed, r.best_accuracy, r.target, reached, r.total_upload_ratio
        );
    }
    for (seed, err) in &report.failed {
        println!("seed {seed}: FAILED: {err}");
    }
}

fn cmd_run(args: &RunArgs, out: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let root = out_root(out, cfg.output_dir.as_deref());
    let opts = RunOptions {
        checkpoint_every: args.checkpoint_every,
    };
    let report = run_experiment(&cfg, &root, &opts)?;
    print_report(&report);
    println!("wrote {}", root.join(&cfg.name).display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs, out: Option<&Path>) -> Result<()> {
    let mut spec = sweep::SweepSpec::load(Path::new(&args.config))?;
    if let Some(seed) = args.seed {
        let mut base = spec.base.clone();
        base.seeds = vec![seed];
        spec = sweep::SweepSpec::new(spec.name, base, &spec.axis, spec.values)?;
    }
    let root = out_root(out, spec.base.output_dir.as_deref());
    let opts = RunOptions {
        checkpoint_every: args.checkpoint_every,
    };
    let report = sweep::run_sweep(&spec, &root, &opts)?;
    print!("{}", report.table_csv());
    println!("wrote {}", root.join(&spec.name).display());
    let failed: usize = report.rows.iter().map(|r| r.failed).sum();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} sweep cell(s) failed")));
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs, out: Option<&Path>) -> Result<()> {
    let root = out_root(out, None);
    let report = compare::run_compare(&args.runs, &root, args.name.as_deref())?;
    for p in &report.comparisons {
        let c = &p.comparison;
        let reduction = c
            .round_reduction
            .map_or_else(|| "n/a".to_string(), |r| format!("{:.1}%", 100.0 * r));
        println!(
            "{} vs {}: median rounds {:?} vs {:?}, round reduction {} ({:?})",
            p.candidate, p.baseline, c.candidate.median_rounds, c.baseline.median_rounds, reduction, c.reduction_bound
        );
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be >= 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker threads: {e}")))?;
    let out = cli.out.as_deref();
    pool.install(|| match &cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Compare(a) => cmd_compare(a, out),
    })
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("24").unwrap(), (24, 24));
        assert_eq!(parse_size("16x20").unwrap(), (16, 20));
        assert!(parse_size("big").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
