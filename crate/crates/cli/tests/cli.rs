use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn xva(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xva"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("XVA_CONFIG")
        .env_remove("XVA_OUT")
        .env_remove("XVA_SEED")
        .env_remove("XVA_THREADS")
        .env_remove("XVA_LAYER")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn validate_reports_full_experiment_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let o = xva(&["validate"], &repo_config("paper_full.toml"), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    for line in [
        "contracts: 33",
        "sum of basket sizes: 93",
        "state dimension: 7",
        "time steps: 200",
        "margin period (steps): 8",
    ] {
        assert!(s.contains(line), "missing {line:?} in\n{s}");
    }
}

#[test]
fn desk_config_validates() {
    let dir = tempfile::tempdir().unwrap();
    let o = xva(&["validate"], &repo_config("desk_scale.toml"), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("contracts: 3"));
}

#[test]
fn missing_prerequisite_exits_3_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = xva(&["train-layer3"], &fixture(), dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("clean.model"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = xva(&["validate"], &dir.path().join("absent.toml"), dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture()).unwrap();
    std::fs::copy(
        fixture().with_file_name("portfolio.toml"),
        dir.path().join("portfolio.toml"),
    )
    .unwrap();
    let cases = [
        text.replace("seed = ", "unknown_key = 1\nseed = "),
        text.replace("schema_version = 1", "schema_version = 2"),
        text.replace("alpha = 0.99", "alpha = 1.5"),
        text.replace("lgd_cpty = 0.3", "lgd_cpty = 1.3"),
        text.replace("x0 = [1.0, 1.0, 1.0, 1.0]", "x0 = [1.0, 1.0, 1.0]"),
        text.replace("paths = [0]", "paths = [64]"),
    ];
    for (i, case) in cases.iter().enumerate() {
        assert_ne!(case, &text, "case {i} did not change the text");
        let cfg = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&cfg, case).unwrap();
        let o = xva(&["validate"], &cfg, dir.path());
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", stderr(&o));
    }
}

#[test]
fn environment_supplies_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_xva"))
        .arg("validate")
        .env("XVA_CONFIG", fixture())
        .env("XVA_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("time steps: 10"));
}

#[test]
fn layer_flag_is_range_checked() {
    let dir = tempfile::tempdir().unwrap();
    let o = xva(&["report", "--layer", "5"], &fixture(), dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_pipeline_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = xva(&["full-pipeline", "--threads", "1"], &fixture(), out);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for f in [
        "clean.model",
        "margin.model",
        "adjustments.model",
        "funding.model",
        "clean_percentiles.csv",
        "im_paths.csv",
        "xva_paths.csv",
        "terminal_errors.csv",
        "training_curves.csv",
        "tva_summary.csv",
        "reference.csv",
    ] {
        assert!(artifacts.contains_key(f), "{f} not recorded");
        assert!(out.join(f).exists(), "{f} not written");
    }

    let pct = read_csv(&out.join("clean_percentiles.csv"));
    assert_eq!(
        pct[0],
        [
            "step",
            "t",
            "mean",
            "p01",
            "p99",
            "analytic_mean",
            "analytic_p01",
            "analytic_p99"
        ]
    );
    assert_eq!(pct.len(), 1 + 11);
    for row in &pct[1..] {
        let v: Vec<f64> = row.iter().map(|s| s.parse().unwrap()).collect();
        let tol = 1e-12;
        assert!(v[3] <= v[2] + tol && v[2] <= v[4] + tol, "{row:?}");
        assert!(v[6] <= v[5] + tol && v[5] <= v[7] + tol, "{row:?}");
    }

    let tva = read_csv(&out.join("tva_summary.csv"));
    let get = |k: &str| -> f64 { tva.iter().find(|r| r[0] == k).unwrap()[1].parse().unwrap() };
    let sum = get("cva") - get("dva") + get("fva") + get("colva") + get("mva");
    assert!((get("tva") - sum).abs() < 1e-12);

    let reference = read_csv(&out.join("reference.csv"));
    assert_eq!(
        reference[0],
        [
            "kind",
            "path",
            "step",
            "t",
            "reference",
            "se",
            "m_ref",
            "n_ref",
            "network"
        ]
    );
    assert!(reference.len() > 1);

    // Editing a recorded artifact is caught on the next read.
    std::fs::write(out.join("clean.model"), b"tampered").unwrap();
    let o = xva(&["report"], &fixture(), out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn single_threaded_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        let o = xva(&["full-pipeline", "--threads", "1", "--layer", "2"], &fixture(), out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "clean.model",
        "margin.model",
        "clean_percentiles.csv",
        "im_paths.csv",
        "training_curves.csv",
        "manifest.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_override_changes_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (out, seed) in [(a.path(), "1"), (b.path(), "2")] {
        let o = xva(&["train-layer1", "--seed", seed], &fixture(), out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_ne!(
        std::fs::read(a.path().join("clean.model")).unwrap(),
        std::fs::read(b.path().join("clean.model")).unwrap()
    );
}

#[test]
fn retraining_a_layer_invalidates_downstream_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["train-layer1", "train-layer2", "train-layer1"] {
        let o = xva(&[cmd], &fixture(), out);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = xva(&["train-layer3"], &fixture(), out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("margin.model"), "{}", stderr(&o));
}

#[test]
fn simulate_dumps_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = xva(&["simulate"], &fixture(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("paths.csv"));
    assert_eq!(rows[0], ["path", "step", "t", "x1", "x2", "x3", "x4"]);
    assert_eq!(rows.len(), 1 + 4 * 11);
}
