use std::path::Path;
use std::process::{Command, Output};

use vfem_core::inference::CoefficientRow;
use vfem_core::io::{read_dataset, read_report, FitReport, InferenceSummary};
use vfem_core::model::ols;
use vfem_core::protocol::MESSAGE_KINDS;

fn vfem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfem")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["generate", "--out", s(dir)];
    args.extend(extra);
    let o = vfem(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn tight_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tight.toml");
    std::fs::write(&path, "[fit]\ntolerance = 1e-12\nbeta_tolerance = 1e-15\n").unwrap();
    path
}

#[test]
fn zero_rows_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vfem(&["generate", "--n", "0", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("\"error\":\"InvalidConfig\""));
}

#[test]
fn smes_like_files_carry_the_target_rates() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), &["--preset", "smes-like", "--seed", "1"]);
    let target = [0.5365, 0.8761, 0.9305, 0.0091, 0.9328];
    let (data, manifest) = read_dataset(tmp.path()).unwrap();
    assert_eq!(data.num_clients(), 5);
    for k in 0..5 {
        assert!(tmp.path().join(format!("client_{}.csv", k + 1)).exists());
        assert!((manifest.missing_rates[k] - target[k]).abs() < 0.01, "client {k}");
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(a.path(), &["--seed", "11"]);
    generate(b.path(), &["--seed", "11"]);
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 5);
    for name in names {
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn oracle_fit_without_missingness_is_ols() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &["--rate", "0", "--seed", "5"]);
    let out = tmp.path().join("f");
    let o = vfem(&["fit", "--data", s(&data), "--engine", "oracle", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let report: FitReport = read_report(&out.join("fit.json")).unwrap();
    let (ds, _) = read_dataset(&data).unwrap();
    let b = ols(&ds.pooled_with_nan(), ds.y()).unwrap();
    for (x, y) in report.theta.beta.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn engines_agree_and_trace_is_schema_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &["--seed", "7"]);
    let (fo, oo) = (tmp.path().join("fed"), tmp.path().join("orc"));
    let trace = tmp.path().join("trace.jsonl");
    assert_eq!(code(&vfem(&["fit", "--data", s(&data), "--out", s(&fo), "--trace", s(&trace)])), 0);
    assert_eq!(code(&vfem(&["fit", "--data", s(&data), "--engine", "oracle", "--out", s(&oo)])), 0);
    let a: FitReport = read_report(&fo.join("fit.json")).unwrap();
    let b: FitReport = read_report(&oo.join("fit.json")).unwrap();
    for (x, y) in a.theta.beta.iter().zip(&b.theta.beta) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
    let records = vfem_core::io::read_trace(&trace).unwrap();
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| MESSAGE_KINDS.contains(&r.body.kind())));
}

#[test]
fn reports_parse_back_losslessly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &["--seed", "8", "--n", "300"]);
    let out = tmp.path().join("f");
    vfem(&["fit", "--data", s(&data), "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("fit.json")).unwrap();
    let report: FitReport = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&report).unwrap() + "\n", text);
}

#[test]
fn unconverged_fit_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), &["--seed", "9", "--n", "300"]);
    assert_eq!(code(&vfem(&["fit", "--data", s(tmp.path()), "--max-iters", "2"])), 2);
}

#[test]
fn complete_data_inference_matches_ols_and_stars_follow_z() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &["--rate", "0", "--seed", "12", "--n", "400"]);
    std::fs::write(tmp.path().join("e.toml"), "[fit]\ntolerance = 1e-12\nbeta_tolerance = 1e-15\n[inference]\nstatistics = \"exact\"\n").unwrap();
    let cfg = tmp.path().join("e.toml");
    let (fo, io) = (tmp.path().join("f"), tmp.path().join("i"));
    assert_eq!(code(&vfem(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&fo)])), 0);
    let o = vfem(&["infer", "--data", s(&data), "--theta", s(&fo.join("fit.json")), "--config", s(&cfg), "--out", s(&io)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: InferenceSummary = read_report(&io.join("inference.json")).unwrap();
    let (ds, _) = read_dataset(&data).unwrap();
    let x = ds.pooled_with_nan();
    let b = ols(&x, ds.y()).unwrap();
    let s2 = (ds.y() - &x * &b).norm_squared() / ds.n() as f64;
    let inv = (x.transpose() * &x).try_inverse().unwrap();
    for (j, row) in summary.coefficients.iter().enumerate() {
        let want = (s2 * inv[(j, j)]).sqrt();
        assert!((row.se - want).abs() < 1e-6 * want, "{j}: {} vs {want}", row.se);
    }
    assert!(summary.gamma_spectral_radius < 1e-4);

    let stdout = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&CoefficientRow> = summary.coefficients.iter().collect();
    for r in rows {
        let line = stdout.lines().find(|l| l.starts_with(&r.name)).unwrap();
        assert_eq!(line.contains(")*"), r.z.abs() > 1.96, "{line}");
    }
}

#[test]
fn stars_mark_only_large_z() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let gen = tmp.path().join("g.toml");
    std::fs::write(
        &gen,
        "[gen]\nn = 300\nbeta = { kind = \"values\", values = [1.0, 0.0, 0.5, 0.02, 0.0, -0.8] }\n[fit]\ntolerance = 1e-12\nbeta_tolerance = 1e-15\n",
    )
    .unwrap();
    let o = vfem(&["generate", "--config", s(&gen), "--out", s(&data), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fo = tmp.path().join("f");
    assert_eq!(code(&vfem(&["fit", "--data", s(&data), "--config", s(&gen), "--out", s(&fo)])), 0);
    let io = tmp.path().join("i");
    let o = vfem(&["infer", "--data", s(&data), "--theta", s(&fo.join("theta.json")), "--out", s(&io)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(io.join("coefficients.csv")).unwrap();
    let mut starred = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let z: f64 = f[3].parse().unwrap();
        let sig: bool = f[5].parse().unwrap();
        assert_eq!(sig, z.abs() > 1.96, "{line}");
        starred += usize::from(sig);
    }
    assert!(starred > 0 && starred < 6, "{csv}");
}

#[test]
fn loose_fit_is_refused_by_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &["--seed", "4", "--n", "300"]);
    let fo = tmp.path().join("f");
    vfem(&["fit", "--data", s(&data), "--max-iters", "3", "--out", s(&fo)]);
    let o = vfem(&["infer", "--data", s(&data), "--theta", s(&fo.join("fit.json"))]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("NotAFixedPoint") && err.contains("tighten"), "{err}");
}

#[test]
fn socket_transport_fits() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), &["--seed", "6", "--n", "200"]);
    let cfg = tight_config(tmp.path());
    let o = vfem(&["fit", "--data", s(tmp.path()), "--transport", "socket", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_replicate_montecarlo() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vfem(&["montecarlo", "--reps", "1", "--methods", "vfem", "--seed", "2", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("vfem"));
}

#[test]
fn benchmark_traffic_is_linear_in_n() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vfem(&["benchmark", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("benchmark.json")).unwrap()).unwrap();
    assert!(v["r2"].as_f64().unwrap() > 0.99);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
}
