use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maxstable::cli::{parse_config, parse_config_str, Manifest, CONFIG_ECHO_FILE, MANIFEST_FILE};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maxstable"));
    c.env_remove("MAXSTABLE_MEMORY_CAP");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn partition_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = run(&[
        "partitions",
        "--n",
        "3",
        "--count-only",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "5");
    let o = run(&[
        "partitions",
        "--n",
        "11",
        "--blocks",
        "2",
        "--count-only",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(stdout(&o).trim(), "1023");
}

#[test]
fn partition_listing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = run(&["partitions", "--n", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("partitions.txt")).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert_eq!(manifest(&out).exit_code, 0);
}

#[test]
fn memory_cap_leaves_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = bin()
        .env("MAXSTABLE_MEMORY_CAP", "1M")
        .args(["partitions", "--n", "11", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("resource guard"), "{}", stderr(&o));
    assert_eq!(listing(&out), vec![CONFIG_ECHO_FILE, MANIFEST_FILE]);
    let m = manifest(&out);
    assert_eq!(m.exit_code, 3);
    assert!(m.outputs.is_empty());
}

const BAD_ALPHA: &str = r#"command = "simulate"
output_dir = "out"
model = "logistic"

[rng]
seed = 7

[logistic]
alpha = 1.5

[sites]
count = 5

[simulate]
replicates = 10
"#;

#[test]
fn invalid_alpha_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, BAD_ALPHA).unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("logistic.alpha"), "{err}");
    assert!(err.contains("line 9"), "{err}");
    assert!(err.contains("alpha must lie in (0, 1]"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_keys_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        BAD_ALPHA.replace("alpha = 1.5", "alpha = 0.5\nbeta = 2"),
    )
    .unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 10"), "{}", stderr(&o));

    assert_eq!(run(&["partitions"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("sim.toml");
    fs::write(&cfg_path, BAD_ALPHA.replace("alpha = 1.5", "alpha = 0.6")).unwrap();
    let cfg = parse_config(&cfg_path).unwrap();
    assert_eq!(cfg.output_dir, dir.path().join("out"));
    assert_eq!(cfg.resources.memory_bytes, 2 << 30);
    assert_eq!(cfg.resources.wall_clock_seconds, None);
    let o = run(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = fs::read_to_string(dir.path().join("out").join(CONFIG_ECHO_FILE)).unwrap();
    let again = parse_config_str(&echo, Path::new("/nonexistent")).unwrap();
    assert_eq!(again, cfg);
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = run(&[
        "simulate",
        "--model",
        "logistic",
        "--params",
        "alpha=0.6",
        "--n-sites",
        "5",
        "--replicates",
        "200",
        "--seed",
        "9",
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["data.csv", "sites.csv", "simulation.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let side = read_json(&sim.join("simulation.json"));
    assert_eq!(side["replicates"], 200);

    let fit = dir.path().join("fit");
    let o = run(&[
        "fit",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--sites",
        sim.join("sites.csv").to_str().unwrap(),
        "--model",
        "logistic",
        "--q",
        "5",
        "--start",
        "0.5",
        "--out",
        fit.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = read_json(&fit.join("fit.json"));
    let alpha = r["theta_hat"][0].as_f64().unwrap();
    // the standard deviation of the full-likelihood estimator is near 0.015 at m = 200
    assert!((alpha - 0.6).abs() < 0.05, "{alpha}");
    assert_eq!(r["converged"], true);
    let m = manifest(&fit);
    assert_eq!(m.inputs.len(), 2);
}

#[test]
fn reich_shaby_simulation_with_knot_file() {
    let dir = tempfile::tempdir().unwrap();
    let knots = dir.path().join("knots.csv");
    fs::write(&knots, "x,y\n0.25,0.25\n0.75,0.25\n0.25,0.75\n0.75,0.75\n").unwrap();
    let out = dir.path().join("rs");
    let o = run(&[
        "simulate",
        "--model",
        "reich_shaby",
        "--params",
        "alpha=0.5,tau=0.3",
        "--n-sites",
        "4",
        "--knots",
        knots.to_str().unwrap(),
        "--replicates",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let side = read_json(&out.join("simulation.json"));
    assert_eq!(side["model"]["knots"].as_array().unwrap().len(), 4);
}

const STUDY: &str = r#"command = "study"
output_dir = "first"

[study]
sites = 5
replicates = 20
experiments = 6
orders = [2, 3, 5]
truncations = [0.5, 1.0]
seed = 11

[study.model]
family = "logistic"
alpha = 0.6
"#;

#[test]
fn rerun_reproduces_outputs_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.toml");
    fs::write(&cfg, STUDY).unwrap();
    let o = run(&["--threads", "2", "run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = dir.path().join("first");
    let m = manifest(&first);
    assert!(m
        .outputs
        .iter()
        .any(|f| f.path.ends_with("report.csv") && f.deterministic));
    assert!(m
        .outputs
        .iter()
        .any(|f| f.path.ends_with("timings.csv") && !f.deterministic));

    let second = dir.path().join("second");
    let o = run(&[
        "--threads",
        "1",
        "rerun",
        "--manifest",
        first.join(MANIFEST_FILE).to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("all deterministic outputs reproduced"));
    for f in ["report.csv", "raw_estimates.csv"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }

    // a tampered hash is reported as a mismatch
    let mut m = manifest(&first);
    let rec = m
        .outputs
        .iter_mut()
        .find(|f| f.path.ends_with("report.csv"))
        .unwrap();
    rec.sha256 = "0".repeat(64);
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_string(&m).unwrap()).unwrap();
    let o = run(&[
        "rerun",
        "--manifest",
        tampered.to_str().unwrap(),
        "--out",
        dir.path().join("third").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(7), "{}", stderr(&o));
}

#[test]
fn project_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    let timings = dir.path().join("timings.csv");
    fs::write(
        &timings,
        "experiment,q,total,t,wall_seconds,likelihood_evaluations,likelihood_seconds\n0,2,50,1,1,10,0.5\n",
    )
    .unwrap();
    let out = dir.path().join("proj");
    let o = run(&[
        "project",
        "--timings",
        timings.to_str().unwrap(),
        "--targets",
        "2:50,2:100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("projection.csv")).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
    assert!(text.contains("4950"), "{text}");
}

#[test]
fn wall_clock_cap_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.toml");
    let slow = STUDY
        .replace("experiments = 6", "experiments = 400")
        .replace(
            "[study]",
            "[resources]\nwall_clock_seconds = 0.5\n\n[study]",
        );
    fs::write(&cfg, slow).unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(
        listing(&dir.path().join("first")),
        vec![CONFIG_ECHO_FILE, MANIFEST_FILE]
    );
}
