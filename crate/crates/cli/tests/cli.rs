use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn oavnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oavnn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn gen(dir: &Path, kind: &str, count: &str, jitter: &str, seed: &str, out: &str) {
    ok(&oavnn(
        &["gen-data", "--kind", kind, "--count", count, "--jitter", jitter, "--seed", seed, "--out", out],
        dir,
    ));
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const TINY: &str = r#""encoder_widths": [4, 6], "block_width": 5, "attention_width": 3"#;

#[test]
fn gen_data_writes_mirrored_files_and_manifest() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "airplane", "2", "0", "5", "a");
    let manifest = json_file(&tmp.path().join("a/manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    for (i, f) in files.iter().enumerate() {
        assert_eq!(f["spec"]["seed"], 5 + i as u64);
        assert_eq!(f["mirror_residual"].as_f64().unwrap(), 0.0);
        let cloud = oavnn::geometry::load_xyz(tmp.path().join("a").join(f["file"].as_str().unwrap())).unwrap();
        assert_eq!(cloud.len(), 256);
        assert!(cloud.labels.is_some());
    }
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "chair", "1", "0.01", "9", "x");
    gen(tmp.path(), "chair", "1", "0.01", "9", "y");
    let a = std::fs::read(tmp.path().join("x/chair_0000.xyz")).unwrap();
    let b = std::fs::read(tmp.path().join("y/chair_0000.xyz")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gen_data_records_jitter_residual() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "airplane", "1", "0.05", "0", "j");
    let m = json_file(&tmp.path().join("j/manifest.json"));
    assert!(m["files"][0]["mirror_residual"].as_f64().unwrap() > 0.0);
}

#[test]
fn gen_data_rejects_bad_kind_and_unwritable_path() {
    let tmp = TempDir::new().unwrap();
    let o = oavnn(&["gen-data", "--kind", "sofa", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(tmp.path().join("file"), "").unwrap();
    let o = oavnn(&["gen-data", "--kind", "cap", "--out", "file/sub"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn detect_symmetry_finds_the_construction_axis() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "airplane", "1", "0", "3", "a");
    let o = oavnn(&["detect-symmetry", "a/airplane_0000.xyz", "--json"], tmp.path());
    ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let u: Vec<f64> = v["direction"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let angle = u[0].abs().min(1.0).acos();
    assert!(angle < 1e-5, "angle {angle}");
    assert_eq!(v["degenerate"], false);
    assert_eq!(v["shells"], 4);
}

#[test]
fn detect_symmetry_flags_tables() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "table", "1", "0", "0", "t");
    let o = oavnn(&["detect-symmetry", "t/table_0000.xyz"], tmp.path());
    ok(&o);
    assert!(stdout(&o).contains("degenerate: multi-plane/isotropic"), "{}", stdout(&o));
}

#[test]
fn detect_symmetry_golden_six_points() {
    let file = fixture("six.xyz");
    let cases: [(&str, [f64; 3]); 2] = [
        ("2", [0.0975, 0.12097222222222227, -0.1995833333333333]),
        ("3", [-0.023333333333333334, 0.07981481481481484, -0.025555555555555526]),
    ];
    for (n, want) in cases {
        let o = oavnn(&["detect-symmetry", file.to_str().unwrap(), "--shells", n, "--json"], Path::new("."));
        ok(&o);
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        for t in 0..3 {
            let got = v["c"][t].as_f64().unwrap();
            assert!((got - want[t]).abs() < 1e-12, "n={n} c[{t}] = {got}, want {}", want[t]);
        }
        assert_eq!(v["shells"].as_u64().unwrap().to_string(), n);
    }
}

#[test]
fn detect_symmetry_parse_error_exits_2() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("bad.xyz"), "1 2 3\n1 2 oops\n").unwrap();
    let o = oavnn(&["detect-symmetry", "bad.xyz"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn segment_plane_on_chair_cap_table_and_jitter() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "chair", "1", "0", "1", "c");
    let o = oavnn(&["segment-plane", "c/chair_0000.xyz", "--out", "c.csv"], tmp.path());
    ok(&o);
    assert!(stdout(&o).contains("accuracy   1\n"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(tmp.path().join("c.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("index,label,on_plane"));
    assert_eq!(csv.lines().count(), 257);

    gen(tmp.path(), "table", "1", "0", "1", "t");
    let o = oavnn(&["segment-plane", "t/table_0000.xyz"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("degenerate"), "{}", stderr(&o));

    gen(tmp.path(), "airplane", "1", "0.02", "1", "j");
    let o = oavnn(&["segment-plane", "j/airplane_0000.xyz"], tmp.path());
    ok(&o);
    let acc: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("accuracy"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn every_command_echoes_its_config() {
    let tmp = TempDir::new().unwrap();
    let o = oavnn(&["check-gradients", "--layer", "head"], tmp.path());
    ok(&o);
    assert!(stderr(&o).contains(r#"effective config (check-gradients): {"layer":"head","seed":0,"tolerance":0.0001}"#));
}

#[test]
fn train_vnn_sits_at_chance_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let body = format!(
        r#"{{"model": {{"variant": "VNN", "epochs": 3, {TINY}}}, "data": {{"train_count": 8, "test_count": 4, "n_points": 64}}, "out_dir": "a"}}"#
    );
    let cfg = write_config(tmp.path(), "vnn.json", &body);
    ok(&oavnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path()));
    let summary = json_file(&tmp.path().join("a/summary.json"));
    assert_eq!(summary["variant"], "VNN");
    let acc = summary["final_test_accuracy"].as_f64().unwrap();
    assert!((0.45..=0.55).contains(&acc), "{acc}");

    let metrics = std::fs::read_to_string(tmp.path().join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,split,accuracy,loss"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);

    // The saved effective config reproduces the run bit for bit.
    ok(&oavnn(&["train", "--config", "a/config.json", "--out", "b"], tmp.path()));
    for f in ["metrics.csv", "checkpoint.json"] {
        let x = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(x == y, "{f} differs between reruns");
    }
}

#[test]
fn train_rejects_bad_configs_and_reports_divergence() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"model": {"variant": "OAVNN", "depth": 3}}"#);
    let o = oavnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(tmp.path(), "zero.json", r#"{"model": {"batch_size": 0}}"#);
    assert_eq!(oavnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(2));

    let body = format!(
        r#"{{"model": {{"epochs": 2, "learning_rate": 1e250, {TINY}}}, "data": {{"train_count": 8, "test_count": 4, "n_points": 64}}, "out_dir": "d"}}"#
    );
    let cfg = write_config(tmp.path(), "div.json", &body);
    let o = oavnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn train_oavnn_then_eval_reproduces_the_log() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "o.json",
        r#"{"model": {"variant": "OAVNN", "epochs": 15}, "data": {"train_count": 100, "test_count": 20, "n_points": 256}, "out_dir": "o"}"#,
    );
    ok(&oavnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path()));
    let summary = json_file(&tmp.path().join("o/summary.json"));
    let acc = summary["final_test_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "OAVNN final test accuracy {acc}");

    let mut reader = csv::Reader::from_path(tmp.path().join("o/metrics.csv")).unwrap();
    let last_test: f64 = reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[1] == "test")
        .last()
        .unwrap()[2]
        .parse()
        .unwrap();
    let o = oavnn(&["eval", "--checkpoint", "o/checkpoint.json", "--data", "o/config.json"], tmp.path());
    ok(&o);
    let got: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(got, last_test);
    assert_eq!(got, acc);
}

#[test]
fn eval_on_xyz_directory() {
    let tmp = TempDir::new().unwrap();
    let body = format!(
        r#"{{"model": {{"epochs": 1, {TINY}}}, "data": {{"train_count": 4, "test_count": 2, "n_points": 64}}, "out_dir": "r"}}"#
    );
    let cfg = write_config(tmp.path(), "c.json", &body);
    ok(&oavnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path()));
    ok(&oavnn(&["gen-data", "--kind", "cap", "--count", "2", "--points", "64", "--out", "caps"], tmp.path()));
    let o = oavnn(&["eval", "--checkpoint", "r/checkpoint.json", "--data", "caps"], tmp.path());
    ok(&o);
    assert!(stdout(&o).contains("clouds 2"));
    let o = oavnn(&["eval", "--checkpoint", "c.json", "--data", "caps"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_equivariance_table() {
    let tmp = TempDir::new().unwrap();
    let o = oavnn(&["check-equivariance", "--stage", "all", "--trials", "100"], tmp.path());
    ok(&o);
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.ends_with("pass")).count(), 11, "{out}");

    let o = oavnn(
        &["check-equivariance", "--stage", "model_oavnn", "--trials", "10", "--improper"],
        tmp.path(),
    );
    ok(&o);
    assert!(stdout(&o).contains("sensitive (expected)"), "{}", stdout(&o));

    let o = oavnn(&["check-equivariance", "--stage", "vn_nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_equivariance_fails_on_an_impossible_tolerance() {
    let tmp = TempDir::new().unwrap();
    let o = oavnn(
        &["check-equivariance", "--stage", "vn_relu", "--trials", "5", "--tolerance", "0"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn check_gradients_complex_linear() {
    let tmp = TempDir::new().unwrap();
    let o = oavnn(&["check-gradients", "--layer", "complex_linear"], tmp.path());
    ok(&o);
    let line = stdout(&o).lines().find(|l| l.starts_with("complex_linear")).unwrap().to_owned();
    let err: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err <= 1e-4, "{line}");
    assert_eq!(oavnn(&["check-gradients", "--layer", "conv"], tmp.path()).status.code(), Some(2));
}

#[test]
fn report_draws_one_curve_per_variant() {
    let tmp = TempDir::new().unwrap();
    for v in ["OAVNN", "VNN", "ShellOnly", "ComplexOnly"] {
        let body = format!(
            r#"{{"model": {{"variant": "{v}", "epochs": 2, {TINY}}}, "data": {{"train_count": 4, "test_count": 2, "n_points": 64}}, "out_dir": "runs/{v}"}}"#
        );
        let cfg = write_config(tmp.path(), &format!("{v}.json"), &body);
        ok(&oavnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path()));
    }
    let o = oavnn(&["report", "--runs", "runs", "--out", "curves.svg"], tmp.path());
    ok(&o);
    let svg = std::fs::read_to_string(tmp.path().join("curves.svg")).unwrap();
    assert!(svg.contains(r#"version="1.1""#));
    assert_eq!(svg.matches("<polyline").count(), 8);
    for v in ["OAVNN", "VNN", "ShellOnly", "ComplexOnly"] {
        assert!(svg.contains(&format!(r#"id="curve-{v}""#)), "{v}");
    }
    let summary = json_file(&tmp.path().join("curves.json"));
    let arr = summary.as_array().unwrap();
    assert_eq!(arr.len(), 4);
    for s in arr {
        assert!(s.get("variant").is_some() && s.get("final_test_accuracy").is_some() && s.get("epochs_to_90").is_some());
    }

    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    let o = oavnn(&["report", "--runs", "empty", "--out", "e.svg"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}
