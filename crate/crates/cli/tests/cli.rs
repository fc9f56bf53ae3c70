use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsup_cli::compare::CompareReport;
use fedsup_cli::RunReport;

const TINY: &str = r#"
preset = "desk"
edges = 2
clients = 4
participation = 0.5
local_epochs = 1
rounds = 3
image_height = 16
image_width = 16
num_samples = 120
partition_mu = 20.0
seeds = [1, 2]
"#;

fn fedsup(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsup"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FEDSUP_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, file: &str, extra: &str) -> PathBuf {
    let mut table: toml::Table = TINY.parse().unwrap();
    table.extend(extra.parse::<toml::Table>().unwrap());
    let path = dir.join(file);
    fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(dir: &Path) -> RunReport {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fedsup(
        &["generate", "--samples", "50", "--seed", "7", "--output", "a.fsds"],
        tmp.path(),
    );
    let b = fedsup(
        &["generate", "--samples", "50", "--seed", "7", "--output", "b.fsds"],
        tmp.path(),
    );
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let digest = |o: &Output| stdout(o).split_whitespace().next().unwrap().to_string();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(digest(&a).len(), 64);
    assert_eq!(
        fs::read(tmp.path().join("a.fsds")).unwrap(),
        fs::read(tmp.path().join("b.fsds")).unwrap()
    );

    let ds = fedsup_core::data::load_dataset(&tmp.path().join("a.fsds")).unwrap();
    assert_eq!(ds.len(), 50);
    assert_eq!(ds.image_shape(), (24, 24, 1));

    let c = fedsup(
        &["generate", "--samples", "50", "--seed", "8", "--output", "c.fsds"],
        tmp.path(),
    );
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn generate_default_path_goes_under_out() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fedsup(
        &["--out", "o", "generate", "--samples", "10", "--seed", "3"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tmp.path().join("o/data/blink-n10-s3.fsds").is_file());
}

#[test]
fn invalid_size_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    for size in ["4", "abc", "24x"] {
        let o = fedsup(&["generate", "--size", size], tmp.path());
        assert_eq!(o.status.code(), Some(2), "size {size}: {}", stderr(&o));
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fedsup(&["train"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        fedsup(&["--jobs", "0", "run", "--config", "desk"], tmp.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn run_writes_reproducible_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "name = \"tiny\"\n");
    let cfg = cfg.to_str().unwrap();
    let a = fedsup(&["--out", "a", "run", "--config", cfg], tmp.path());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = fedsup(&["--out", "b", "--jobs", "1", "run", "--config", cfg], tmp.path());
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    for file in ["seed-1.csv", "seed-2.csv", "summary.json", "config.toml"] {
        let fa = fs::read(tmp.path().join("a/tiny").join(file)).unwrap();
        let fb = fs::read(tmp.path().join("b/tiny").join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs");
    }
    let csv = fs::read_to_string(tmp.path().join("a/tiny/seed-1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), fedsup_core::metrics::CSV_HEADER);
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn seed_flag_replaces_the_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "name = \"one\"\n");
    let o = fedsup(
        &["--out", ".", "run", "--config", cfg.to_str().unwrap(), "--seed", "9"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&tmp.path().join("one"));
    assert_eq!(r.seeds.len(), 1);
    assert_eq!(r.seeds[0].seed, 9);
}

#[test]
fn zero_rounds_is_a_successful_empty_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "t0.toml", "name = \"t0\"\nrounds = 0\n");
    let o = fedsup(&["--out", ".", "run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&tmp.path().join("t0"));
    for s in &r.seeds {
        assert_eq!(s.summary.rounds_executed, 0);
        assert_eq!(s.summary.rounds_to_target, None);
        assert_eq!(s.summary.best_accuracy, 0.0);
    }
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("participation = 1.5\n", "participation"),
        ("epsilom = 0.1\n", "epsilom"),
        ("seeds = []\n", "seeds"),
        ("dataset_path = \"missing.fsds\"\n", "dataset_path"),
    ];
    for (i, (extra, field)) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}.toml"), extra);
        let o = fedsup(&["--out", ".", "run", "--config", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(o.status.code(), Some(2), "{extra}");
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
    }
    let o = fedsup(&["run", "--config", "no-such-config.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("blocker"), "not a directory").unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "");
    let o = fedsup(
        &["--out", "blocker", "run", "--config", cfg.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("blocker"), "{}", stderr(&o));
}

#[test]
fn output_root_env_var() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "name = \"envrun\"\nseeds = [1]\nrounds = 1\n");
    let o = Command::new(env!("CARGO_BIN_EXE_fedsup"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("FEDSUP_OUT", tmp.path().join("from-env"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tmp.path().join("from-env/envrun/summary.json").is_file());
}

#[test]
fn dataset_file_input() {
    let tmp = tempfile::tempdir().unwrap();
    let g = fedsup(
        &[
            "generate",
            "--samples",
            "120",
            "--size",
            "16",
            "--seed",
            "4",
            "--output",
            "d.fsds",
        ],
        tmp.path(),
    );
    assert_eq!(g.status.code(), Some(0), "{}", stderr(&g));
    let cfg = write_config(
        tmp.path(),
        "file.toml",
        "name = \"file\"\ndataset_path = \"d.fsds\"\nseeds = [1]\n",
    );
    let o = fedsup(&["--out", ".", "run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(report(&tmp.path().join("file")).seeds[0].summary.rounds_executed, 3);
}

#[test]
fn uwaa_without_filtering_matches_fedavg() {
    let tmp = tempfile::tempdir().unwrap();
    let base = "passes = 1\nepsilon = 0.0\n";
    let u = write_config(
        tmp.path(),
        "u.toml",
        &format!("{base}name = \"u\"\naggregator = \"uwaa\"\n"),
    );
    let f = write_config(
        tmp.path(),
        "f.toml",
        &format!("{base}name = \"f\"\naggregator = \"fedavg\"\n"),
    );
    for cfg in [&u, &f] {
        let o = fedsup(&["--out", ".", "run", "--config", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(report(&tmp.path().join("u")).seeds, report(&tmp.path().join("f")).seeds);
    for seed in [1, 2] {
        let file = format!("seed-{seed}.csv");
        assert_eq!(
            fs::read(tmp.path().join("u").join(&file)).unwrap(),
            fs::read(tmp.path().join("f").join(&file)).unwrap()
        );
    }
}

#[test]
fn checkpoint_flag_writes_models() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "name = \"c\"\nseeds = [1]\n");
    let o = fedsup(
        &[
            "--out",
            ".",
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint-every",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("c/checkpoints/seed-1");
    let names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, vec!["round-0001.fsup"]);
}

#[test]
fn sweep_produces_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("eps.toml");
    fs::write(
        &sweep,
        format!("name = \"eps\"\naxis = \"epsilon\"\nvalues = [0.02, 0.025, 0.03]\n[base]\n{TINY}"),
    )
    .unwrap();
    let o = fedsup(
        &["--out", ".", "sweep", "--config", sweep.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("eps/table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("0.02,2,0,"), "{}", rows[0]);
    let mut csvs = 0;
    for v in ["0.02", "0.025", "0.03"] {
        let dir = tmp.path().join(format!("eps/epsilon={v}"));
        csvs += fs::read_dir(&dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("seed-"))
            .count();
    }
    assert_eq!(csvs, 3 * 2);
}

#[test]
fn single_value_sweep_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "r.toml", "name = \"r\"\npasses = 2\n");
    let o = fedsup(&["--out", ".", "run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sweep = tmp.path().join("one.toml");
    fs::write(
        &sweep,
        "name = \"one\"\naxis = \"passes\"\nvalues = [2]\nbase_config = \"r.toml\"\n",
    )
    .unwrap();
    let o = fedsup(
        &[
            "--out",
            ".",
            "--jobs",
            "2",
            "sweep",
            "--config",
            sweep.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cell = tmp.path().join("one/passes=2");
    for file in ["seed-1.csv", "seed-2.csv"] {
        assert_eq!(
            fs::read(cell.join(file)).unwrap(),
            fs::read(tmp.path().join("r").join(file)).unwrap()
        );
    }
    assert_eq!(report(&cell).seeds, report(&tmp.path().join("r")).seeds);
}

#[test]
fn sweep_with_bad_axis_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("bad.toml");
    fs::write(&sweep, "axis = \"epsilom\"\nvalues = [0.1]\n").unwrap();
    let o = fedsup(&["sweep", "--config", sweep.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilom"));
}

#[test]
fn compare_reports_reduction_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.toml", "name = \"a\"\n");
    let b = write_config(
        tmp.path(),
        "b.toml",
        "name = \"b\"\naggregator = \"fedavg\"\npasses = 1\nepsilon = 0.0\n",
    );
    for cfg in [&a, &b] {
        let o = fedsup(&["--out", ".", "run", "--config", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = fedsup(&["--out", ".", "compare", "a", "b"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("compare-a-vs-b");
    let report: CompareReport =
        serde_json::from_str(&fs::read_to_string(dir.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(report.comparisons.len(), 1);
    let acc = fs::read_to_string(dir.join("accuracy_vs_round.csv")).unwrap();
    assert_eq!(acc.lines().next().unwrap(), "round,a,b");
    assert_eq!(acc.lines().count(), 1 + 3);
    let up = fs::read_to_string(dir.join("uploads_vs_round.csv")).unwrap();
    assert_eq!(up.lines().count(), 1 + 3);

    let o = fedsup(&["--out", ".", "compare", "a", "a", "--name", "self"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: CompareReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("self/comparison.json")).unwrap()).unwrap();
    let c = &report.comparisons[0].comparison;
    assert_eq!(c.candidate, c.baseline);
    if let Some(r) = c.round_reduction {
        assert_eq!(r, 0.0);
    }
}

#[test]
fn compare_refuses_unrelated_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.toml", "name = \"a\"\nseeds = [1]\n");
    let b = write_config(
        tmp.path(),
        "b.toml",
        "name = \"b\"\nseeds = [1]\nlearning_rate = 0.05\n",
    );
    for cfg in [&a, &b] {
        let o = fedsup(&["--out", ".", "run", "--config", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = fedsup(&["--out", ".", "compare", "a", "b"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert_eq!(fedsup(&["compare", "a"], tmp.path()).status.code(), Some(2));
}
