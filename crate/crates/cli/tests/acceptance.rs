//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always
//! printed. The desk-scale experiments (criteria 5 to 8) take tens of
//! minutes on a single core.

#[path = "../../core/tests/support/micro_net.rs"]
mod micro_net;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedsup_cli::config::{preset, ExperimentConfig, Method};
use fedsup_cli::experiment::{build_setup, run_experiment, RunOptions, RunReport};
use fedsup_cli::sweep::{run_sweep, SweepSpec};
use fedsup_core::features::{gabor_kernel, lbp_map, perclos, EyeState, FrameStateSequence, GaborParams};
use fedsup_core::federation::{cloud_execute, fedavg_aggregate, uwaa_aggregate, Aggregator, EdgeResult, UwaaWeighting};
use fedsup_core::metrics::{compare_runs, MetricsSink};
use fedsup_core::nn::{ModelParams, ParamEntry};
use fedsup_core::uncertainty::{confidence_uncertainty, ClientConfig};
use fedsup_core::{RngStream, Tensor};
use rand::Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

impl Outcome {
    fn print(&self) {
        let within = self.elapsed <= self.budget;
        println!(
            "{} {:>2} {}: {} [{:.1}s of {}s budget{}]",
            if self.pass && within { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            if within { "" } else { ", over budget" }
        );
    }

    fn ok(&self) -> bool {
        self.pass && self.elapsed <= self.budget
    }
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn timed(f: impl FnOnce() -> (bool, String)) -> (bool, String, Duration) {
    let start = Instant::now();
    let (pass, detail) = f();
    (pass, detail, start.elapsed())
}

/// Criterion 1: with M = 1 and epsilon = 0 the UWAA trajectory equals FedAvg's bit for bit.
fn fedavg_reduction() -> (bool, String) {
    let mut mismatches = Vec::new();
    let rounds = 8;
    for seed in [1u64, 2, 3] {
        let cfg = ExperimentConfig {
            rounds,
            ..preset("desk").unwrap()
        };
        let setup = build_setup(&cfg, seed).unwrap();
        let mut fed = cfg.federation();
        fed.client = ClientConfig {
            passes: 1,
            epsilon: 0.0,
        };
        let run = |aggregator| {
            let mut sink = MetricsSink::in_memory();
            let cfg = fedsup_core::federation::FederationConfig {
                aggregator,
                ..fed.clone()
            };
            let state = cloud_execute(&cfg, &setup, seed, &mut sink, &mut |_, _| Ok(())).unwrap();
            (sink.into_rounds(), state.omega_c)
        };
        let (ru, pu) = run(Aggregator::Uwaa);
        let (rf, pf) = run(Aggregator::Fedavg);
        if ru != rf || pu.to_bytes() != pf.to_bytes() {
            mismatches.push(seed);
        }
    }
    (
        mismatches.is_empty(),
        format!("3 seeds x {rounds} rounds, mismatching seeds {mismatches:?}"),
    )
}

fn vector_params(values: Vec<f32>) -> ModelParams {
    let n = values.len();
    ModelParams::from_entries(vec![ParamEntry {
        layer: 0,
        weight: Tensor::new(vec![n], values).unwrap(),
        bias: Tensor::scalar(0.0),
    }])
}

/// Criterion 2: UWAA aggregation against a brute-force weighted sum, and against
/// FedAvg when every alpha is equal.
fn aggregation_oracle() -> (bool, String) {
    let mut rng = RngStream::new(20, 0);
    let mut worst: f64 = 0.0;
    let mut worst_equal: f64 = 0.0;
    for _ in 0..1000 {
        let edges = rng.gen_range(1..=6);
        let dim = rng.gen_range(1..=20);
        let results: Vec<EdgeResult> = (0..edges)
            .map(|k| EdgeResult {
                edge_id: k,
                params: vector_params((0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()),
                alpha_e: rng.gen_range(0.0..0.25),
                n_k: rng.gen_range(1..=100),
            })
            .collect();
        let out = uwaa_aggregate(&results, UwaaWeighting::Normalized).unwrap();
        let columns: Vec<Vec<f32>> = results.iter().map(|r| r.params.values().collect()).collect();
        for (j, got) in out.values().enumerate() {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (r, column) in results.iter().zip(&columns) {
                let w = r.alpha_e.exp() * r.n_k as f64;
                num += w * f64::from(column[j]);
                den += w;
            }
            worst = worst.max((num / den - f64::from(got)).abs());
        }

        let alpha = rng.gen_range(0.0..0.25);
        let equal: Vec<EdgeResult> = results
            .into_iter()
            .map(|r| EdgeResult { alpha_e: alpha, ..r })
            .collect();
        let u = uwaa_aggregate(&equal, UwaaWeighting::Normalized).unwrap();
        let pairs: Vec<(&ModelParams, usize)> = equal.iter().map(|r| (&r.params, r.n_k)).collect();
        let f = fedavg_aggregate(&pairs).unwrap();
        for (a, b) in u.values().zip(f.values()) {
            worst_equal = worst_equal.max(f64::from((a - b).abs()));
        }
    }
    (
        worst <= 1e-6 && worst_equal <= 1e-6,
        format!(
            "1000 instances, max |uwaa - oracle| {worst:.2e}, max |uwaa - fedavg| at equal alpha {worst_equal:.2e}"
        ),
    )
}

/// Criterion 3: Confidence and uncertainty against a two-pass mean and variance.
fn uncertainty_oracle() -> (bool, String) {
    let mut rng = RngStream::new(30, 0);
    let mut worst: f64 = 0.0;
    let mut class_mismatch = 0;
    for _ in 0..10_000 {
        let m = rng.gen_range(1..=10);
        let c = rng.gen_range(2..=10);
        let passes: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(1e-3..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let means: Vec<f64> = (0..c)
            .map(|k| passes.iter().map(|p| p[k]).sum::<f64>() / m as f64)
            .collect();
        let mut best = 0;
        for k in 1..c {
            if means[k] > means[best] {
                best = k;
            }
        }
        let r = means[best];
        let var = passes.iter().map(|p| (p[best] - r).powi(2)).sum::<f64>() / m as f64;
        let got = confidence_uncertainty(&passes).unwrap();
        if got.predicted_class != best {
            class_mismatch += 1;
        }
        worst = worst.max((got.r - r).abs()).max((got.alpha - var).abs());
    }
    let constant = confidence_uncertainty(&vec![vec![0.3, 0.7]; 5]).unwrap().alpha;
    let single = confidence_uncertainty(&[vec![0.1, 0.6, 0.3]]).unwrap().alpha;
    (
        worst <= 1e-9 && class_mismatch == 0 && constant == 0.0 && single == 0.0,
        format!(
            "10000 matrices, max error {worst:.2e}, class mismatches {class_mismatch}, constant alpha {constant}, M=1 alpha {single}"
        ),
    )
}

/// Criterion 4: Analytic gradients against central finite differences.
fn gradient_checks() -> (bool, String) {
    let check = micro_net::gradient_check(100, 4, 1e-3);
    (
        check.checked == 100 && check.failures.is_empty(),
        format!(
            "{} instances, worst relative error {:.2e}, {} failures, {} redrawn near kinks",
            check.checked,
            check.worst,
            check.failures.len(),
            check.redrawn
        ),
    )
}

/// Criterion 9: Gabor, LBP and PERCLOS against hand-computable oracles.
fn feature_oracles() -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut kernels = 0;
    let mut center_exact = true;
    for size in [3usize, 7, 9] {
        for theta in [0.0, std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2, 2.3, 3.0] {
            for lambda in [2.5, 4.0, 8.0] {
                for sigma in [1.0, 2.0, 3.5] {
                    for gamma in [0.5, 1.0] {
                        for psi in [0.0, std::f64::consts::FRAC_PI_2, 1.0] {
                            let p = GaborParams {
                                theta,
                                lambda,
                                sigma,
                                gamma,
                                psi,
                                size,
                            };
                            let k = gabor_kernel(&p).unwrap();
                            let half = (size / 2) as f64;
                            for row in 0..size {
                                for col in 0..size {
                                    let (x, y) = (col as f64 - half, row as f64 - half);
                                    let xp = x * theta.cos() + y * theta.sin();
                                    let yp = -x * theta.sin() + y * theta.cos();
                                    let g = (-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma)).exp()
                                        * (2.0 * std::f64::consts::PI * xp / lambda + psi).cos();
                                    worst = worst.max((g - f64::from(k.data()[row * size + col])).abs());
                                }
                            }
                            if psi == 0.0 && k.data()[(size / 2) * size + size / 2] != 1.0 {
                                center_exact = false;
                            }
                            kernels += 1;
                        }
                    }
                }
            }
        }
    }

    let patch = Tensor::new(vec![3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
    let code30 = lbp_map(&patch).unwrap().data()[0];
    let constant = lbp_map(&Tensor::full(&[5, 5], 0.4)).unwrap();
    let all_255 = constant.data().iter().all(|&c| c == 255.0);
    let mut peak = vec![0.1f32; 9];
    peak[4] = 0.9;
    let code0 = lbp_map(&Tensor::new(vec![3, 3], peak).unwrap()).unwrap().data()[0];

    use EyeState::{Closed as C, Open as O};
    let seq = |s: Vec<EyeState>| FrameStateSequence::new(s, 30.0).unwrap();
    let open = perclos(&seq(vec![O; 12]), 4).unwrap();
    let closed = perclos(&seq(vec![C; 12]), 4).unwrap();
    let example = perclos(&seq(vec![C, O, O, C, C, O, O, O, O, O]), 10).unwrap();
    let perclos_ok = open.iter().all(|&v| v == 0.0) && closed.iter().all(|&v| v == 1.0) && example == vec![0.3];

    (
        worst <= 1e-6 && center_exact && code30 == 30.0 && all_255 && code0 == 0.0 && perclos_ok,
        format!(
            "{kernels} Gabor kernels max error {worst:.2e}, center exact {center_exact}; LBP example {code30}, constant 255 {all_255}, peak {code0}; PERCLOS {:?}/{:?}/{:?}",
            open[0], closed[0], example
        ),
    )
}

fn mean_of(report: &RunReport, f: impl Fn(&fedsup_core::metrics::RunSummary) -> f64) -> f64 {
    report.seeds.iter().map(|s| f(&s.summary)).sum::<f64>() / report.seeds.len() as f64
}

struct DeskRuns {
    /// Epsilon sweep over {0.02, 0.025, 0.03}, in that order.
    sweep: Vec<RunReport>,
    baseline: RunReport,
    centralized: RunReport,
    standalone: RunReport,
    sweep_time: Duration,
    baseline_time: Duration,
    baselines_time: Duration,
}

/// The shared desk-scale experiment for criteria 5 to 8.
fn desk_runs(out: &Path) -> DeskRuns {
    let base = ExperimentConfig {
        name: "uwaa".into(),
        ..preset("desk").unwrap()
    };
    let opts = RunOptions::default();
    let start = Instant::now();
    let spec = SweepSpec::new(
        "epsilon-sweep".into(),
        base.clone(),
        "epsilon",
        vec![0.02.into(), 0.025.into(), 0.03.into()],
    )
    .unwrap();
    let sweep = run_sweep(&spec, out, &opts).unwrap().runs;
    let sweep_time = start.elapsed();

    let start = Instant::now();
    let baseline = run_experiment(
        &ExperimentConfig {
            name: "fedavg".into(),
            aggregator: Aggregator::Fedavg,
            passes: 1,
            epsilon: 0.0,
            ..base.clone()
        },
        out,
        &opts,
    )
    .unwrap();
    let baseline_time = start.elapsed();

    let start = Instant::now();
    let centralized = run_experiment(
        &ExperimentConfig {
            name: "centralized".into(),
            method: Method::Centralized,
            ..base.clone()
        },
        out,
        &opts,
    )
    .unwrap();
    let standalone = run_experiment(
        &ExperimentConfig {
            name: "standalone".into(),
            method: Method::Standalone,
            ..base
        },
        out,
        &opts,
    )
    .unwrap();
    let baselines_time = start.elapsed();
    DeskRuns {
        sweep,
        baseline,
        centralized,
        standalone,
        sweep_time,
        baseline_time,
        baselines_time,
    }
}

fn print_runs(runs: &DeskRuns) {
    let show = |r: &RunReport| {
        let per_seed: Vec<String> = r
            .seeds
            .iter()
            .map(|s| {
                format!(
                    "{}:{:.3}/{}/{:.3}",
                    s.seed,
                    s.summary.best_accuracy,
                    s.summary.rounds_to_target.map_or("-".into(), |t| t.to_string()),
                    s.summary.total_upload_ratio
                )
            })
            .collect();
        println!("     {:<16} seed:best/rounds/ratio {}", r.name, per_seed.join(" "));
    };
    for r in runs
        .sweep
        .iter()
        .chain([&runs.baseline, &runs.centralized, &runs.standalone])
    {
        show(r);
    }
}

/// Criterion 10: `fedsup run` output is byte-identical across repeats and `--jobs`.
fn determinism(work: &Path) -> (bool, String) {
    let cfg = work.join("det.toml");
    fs::write(&cfg, "preset = \"desk\"\nname = \"det\"\nrounds = 3\nseeds = [1, 2]\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    for (out, jobs) in runs {
        let status = Command::new(env!("CARGO_BIN_EXE_fedsup"))
            .args(["--out", out, "--jobs", jobs, "run", "--config", cfg])
            .current_dir(work)
            .output()
            .unwrap();
        if !status.status.success() {
            return (
                false,
                format!("run failed: {}", String::from_utf8_lossy(&status.stderr)),
            );
        }
    }
    let snapshot = |out: &str| -> BTreeMap<String, Vec<u8>> {
        let dir = work.join(out).join("det");
        fs::read_dir(&dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
            })
            .collect()
    };
    let a = snapshot("a");
    let same_repeat = a == snapshot("b");
    let same_jobs = a == snapshot("c");
    (
        same_repeat && same_jobs && a.len() == 4,
        format!(
            "{} files; repeat identical {same_repeat}, --jobs 1 vs 4 identical {same_jobs}",
            a.len()
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        // `cargo test -- --list` probes every test target
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        o.print();
        outcomes.push(o);
    };

    type Check = fn() -> (bool, String);
    let cheap: [(u32, &str, Check, u64); 4] = [
        (1, "FedAVG reduction exactness", fedavg_reduction, 2),
        (2, "aggregation oracle", aggregation_oracle, 1),
        (3, "uncertainty oracle", uncertainty_oracle, 1),
        (4, "gradient checks", gradient_checks, 5),
    ];
    for (id, name, f, budget) in cheap {
        let (pass, detail, elapsed) = timed(f);
        record(Outcome {
            id,
            name,
            pass,
            detail,
            elapsed,
            budget: minutes(budget),
        });
    }

    let runs = desk_runs(&work.path().join("desk"));
    print_runs(&runs);
    let uwaa = &runs.sweep[1];

    let ratio_uwaa = mean_of(uwaa, |s| s.total_upload_ratio);
    let ratio_base = mean_of(&runs.baseline, |s| s.total_upload_ratio);
    record(Outcome {
        id: 5,
        name: "upload-reduction direction",
        pass: ratio_uwaa <= 0.5 * ratio_base,
        detail: format!(
            "mean upload ratio UWAA {ratio_uwaa:.4} vs baseline {ratio_base:.4} ({:.1}% reduction)",
            100.0 * (1.0 - ratio_uwaa / ratio_base)
        ),
        elapsed: runs.sweep_time / 3 + runs.baseline_time,
        budget: minutes(30),
    });

    let cmp = compare_runs(&uwaa.summaries(), &runs.baseline.summaries()).unwrap();
    let (mu, mb) = (
        cmp.candidate.median_rounds.unwrap(),
        cmp.baseline.median_rounds.unwrap(),
    );
    let reduction = cmp
        .round_reduction
        .map_or_else(|| "n/a".to_string(), |r| format!("{:.1}%", 100.0 * r));
    record(Outcome {
        id: 6,
        name: "rounds-to-target direction",
        pass: mu <= mb,
        detail: format!(
            "median rounds to {:.2}: UWAA {mu} vs FedAVG {mb}, reduction {reduction} ({:?}; not reached {} vs {})",
            cmp.target, cmp.reduction_bound, cmp.candidate_not_reached, cmp.baseline_not_reached
        ),
        elapsed: runs.sweep_time / 3 + runs.baseline_time,
        budget: minutes(45),
    });

    let best = |r: &RunReport| mean_of(r, |s| s.best_accuracy);
    let (central, fed, alone) = (best(&runs.centralized), best(uwaa), best(&runs.standalone));
    record(Outcome {
        id: 7,
        name: "baseline ordering",
        pass: central >= fed - 0.01 && fed >= alone - 0.01,
        detail: format!(
            "mean best accuracy centralized {central:.4} >= UWAA {fed:.4} >= standalone {alone:.4} (1-point tolerance)"
        ),
        elapsed: runs.sweep_time / 3 + runs.baseline_time + runs.baselines_time,
        budget: minutes(45),
    });

    let ratios: Vec<f64> = runs
        .sweep
        .iter()
        .map(|r| mean_of(r, |s| s.total_upload_ratio))
        .collect();
    record(Outcome {
        id: 8,
        name: "epsilon monotonicity",
        pass: ratios.windows(2).all(|w| w[1] <= w[0]),
        detail: format!(
            "mean upload ratio at epsilon 0.02/0.025/0.03: {:.4}/{:.4}/{:.4}",
            ratios[0], ratios[1], ratios[2]
        ),
        elapsed: runs.sweep_time,
        budget: minutes(30),
    });

    let (pass, detail, elapsed) = timed(feature_oracles);
    record(Outcome {
        id: 9,
        name: "feature oracles",
        pass,
        detail,
        elapsed,
        budget: minutes(1),
    });

    let (pass, detail, elapsed) = timed(|| determinism(work.path()));
    record(Outcome {
        id: 10,
        name: "determinism",
        pass,
        detail,
        elapsed,
        budget: minutes(10),
    });

    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.ok()).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
