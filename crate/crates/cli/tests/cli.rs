use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn weightscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weightscope"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = weightscope(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    weightscope(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Moons data plus two small models trained from different seeds.
struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        ok(&["gen-data", "--seed", "5", "--n", "120", "--rotation", "0.4", "--out", s(&data)]);
        for (name, seed) in [("m0", "1"), ("m1", "2")] {
            let out = root.join(name);
            ok(&[
                "train",
                "--data",
                s(&data.join("train.csv")),
                "--arch",
                "h1:8:relu,out:2:identity",
                "--epochs",
                "5",
                "--seed",
                seed,
                "--out",
                s(&out),
            ]);
        }
        Self { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_string()
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["sweep", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["sweep", "--bogus"]), 1);
    assert_eq!(code(&["make-pair", "--regime", "sideways", "--seed", "1", "--out", "/tmp/x"]), 1);
    let out = weightscope(&["gen-data", "--kind", "spirals", "--seed", "1", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--kind"));
}

#[test]
fn missing_and_corrupt_inputs_exit_two() {
    let f = Fixture::new();
    let out = weightscope(&[
        "sweep",
        "--theta0",
        "/nonexistent/a.wsck",
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/test_ood.csv"),
        "--out",
        &f.path("o"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--theta0"));

    let bad = f.root.join("bad.wsck");
    std::fs::write(&bad, b"WSCKnot really").unwrap();
    let args = [
        "sweep",
        "--theta0",
        s(&bad),
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/test_ood.csv"),
        "--out",
        &f.path("o"),
    ];
    assert_eq!(code(&args), 2);
}

#[test]
fn incompatible_pair_exits_two() {
    let f = Fixture::new();
    ok(&[
        "train",
        "--data",
        &f.path("data/train.csv"),
        "--arch",
        "h1:4:relu,out:2:identity",
        "--epochs",
        "1",
        "--seed",
        "3",
        "--out",
        &f.path("small"),
    ]);
    let args = [
        "sweep",
        "--theta0",
        &f.path("m0/model.wsck"),
        "--theta1",
        &f.path("small/model.wsck"),
        "--data",
        &f.path("data/test_ood.csv"),
        "--out",
        &f.path("o"),
    ];
    assert_eq!(code(&args), 2);
}

#[test]
fn fd_cap_trips_numerical_guard() {
    let f = Fixture::new();
    let args = [
        "asymptotic-check",
        "--checkpoint",
        &f.path("m0/model.wsck"),
        "--data",
        &f.path("data/train.csv"),
        "--fd-cap",
        "10",
        "--seed",
        "1",
        "--out",
        &f.path("o"),
    ];
    assert_eq!(code(&args), 3);
}

#[test]
fn sweep_writes_curve_and_report() {
    let f = Fixture::new();
    let out = f.root.join("sweep");
    ok(&[
        "sweep",
        "--theta0",
        &f.path("m0/model.wsck"),
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/test_ood.csv"),
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("alpha,loss,acc"));
    assert_eq!(lines.count(), 21);

    let report = json(&out.join("report.json"));
    for key in ["loss0", "loss1", "acc0", "barrier", "verdict", "manifest"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let digests = &report["manifest"]["input_digests"];
    assert_eq!(digests["theta0"].as_str().unwrap().len(), 64);
    assert_eq!(report["manifest"], json(&out.join("manifest.json")));
}

#[test]
fn sharpness_defaults_are_echoed() {
    let f = Fixture::new();
    let out = f.root.join("sharp");
    ok(&[
        "sharpness",
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/train.csv"),
        "--seed",
        "9",
        "--out",
        s(&out),
    ]);
    let report = json(&out.join("sharpness.json"));
    assert_eq!(report["estimate"]["config"]["rho"], 1.0);
    assert_eq!(report["estimate"]["config"]["iters"], 20);
    assert_eq!(report["manifest"]["config"]["rho"], 1.0);
    assert_eq!(report["estimate"]["config"]["m"], 120);
}

#[test]
fn sharpness_alpha_needs_theta0() {
    let f = Fixture::new();
    let args = [
        "sharpness",
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/train.csv"),
        "--alpha",
        "0.5",
        "--seed",
        "9",
        "--out",
        &f.path("o"),
    ];
    assert_eq!(code(&args), 1);
}

#[test]
fn layer_scope_rejects_unknown_layer() {
    let f = Fixture::new();
    let args = [
        "sharpness",
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/train.csv"),
        "--scope",
        "layer:nope",
        "--seed",
        "9",
        "--out",
        &f.path("o"),
    ];
    assert_eq!(code(&args), 1);
}

#[test]
fn layerwise_writes_one_curve_per_layer() {
    let f = Fixture::new();
    let out = f.root.join("lw");
    ok(&[
        "layerwise",
        "--theta0",
        &f.path("m0/model.wsck"),
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/test_ood.csv"),
        "--alphas",
        "11",
        "--out",
        s(&out),
    ]);
    for layer in ["h1", "out"] {
        let csv = std::fs::read_to_string(out.join(format!("layerwise_{layer}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 12);
    }
    let report = json(&out.join("stragglers.json"));
    assert_eq!(report["report"]["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn high_gain_pair_sweeps_to_high_gain() {
    let tmp = tempfile::tempdir().unwrap();
    let pair = tmp.path().join("pair");
    ok(&["make-pair", "--regime", "high_gain", "--seed", "11", "--out", s(&pair)]);
    assert_eq!(json(&pair.join("pair.json"))["verdict"]["regime"], "HighGain");
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--theta0",
        s(&pair.join("theta0.wsck")),
        "--theta1",
        s(&pair.join("theta1.wsck")),
        "--data",
        s(&pair.join("test_ood.csv")),
        "--out",
        s(&out),
    ]);
    assert_eq!(json(&out.join("report.json"))["verdict"]["regime"], "HighGain");
}

#[test]
fn prune_and_report_outputs() {
    let f = Fixture::new();
    let out = f.root.join("prune");
    ok(&[
        "prune",
        "--theta0",
        &f.path("m0/model.wsck"),
        "--theta1",
        &f.path("m1/model.wsck"),
        "--data",
        &f.path("data/test_ood.csv"),
        "--seed",
        "4",
        "--out",
        s(&out),
    ]);
    for name in ["masks.json", "curve_before.csv", "curve_after.csv", "pruned_theta1.wsck", "manifest.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let plot = f.root.join("plot");
    ok(&[
        "report",
        "--curve",
        s(&out.join("curve_before.csv")),
        "--curve",
        s(&out.join("curve_after.csv")),
        "--title",
        "before -- after",
        "--out",
        s(&plot),
    ]);
    let svg = std::fs::read_to_string(plot.join("report.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 4);
    let comment = &svg[svg.find("<!--").unwrap() + 4..svg.find("-->").unwrap()];
    assert!(!comment.contains("--"));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let f = Fixture::new();
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = f.root.join(format!("t{threads}"));
        ok(&[
            "--threads",
            threads,
            "layerwise",
            "--theta0",
            &f.path("m0/model.wsck"),
            "--theta1",
            &f.path("m1/model.wsck"),
            "--data",
            &f.path("data/test_ood.csv"),
            "--out",
            s(&out),
        ]);
        runs.push(std::fs::read(out.join("stragglers.json")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
}
