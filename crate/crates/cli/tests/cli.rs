use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gelcal_core::data::save_csv;
use gelcal_core::simulation::{generate_kang_schafer, KangSchaferConfig};

fn gelcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gelcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn formula_check_reports_columns_and_errors() {
    let ok = gelcal(&["formula-check", "y ~ z1 + z2 + z1:z2"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("column   z1:z2"));

    let bad = gelcal(&["formula-check", "y ~ + z1"]);
    assert_eq!(bad.status.code(), Some(1));
    let e = error_json(&bad);
    assert_eq!(e["error"], "SyntaxError");
    assert!(e["message"].as_str().unwrap().contains("byte 4"));
}

#[test]
fn bad_flags_are_usage_errors() {
    let o = gelcal(&["simulate", "--reps", "many"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["category"], "usage");
    let o = gelcal(&["simulate", "table9"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gelcal(&["estimate", "--propensity", "r ~ x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(gelcal(&["--help"]).status.success());
}

#[test]
fn full_data_calibration_returns_sample_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(&dir.path().join("full.csv"), "y,x\n1,0\n2,1\n4,3\n3,2\n7,9\n");
    let out = dir.path().join("est.csv");
    let o = gelcal(&[
        "estimate",
        "--input",
        &data,
        "--propensity",
        "r ~ x",
        "--model",
        "y ~ x",
        "--estimator",
        "cal",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.contains("# seed 5"));
    assert!(csv.contains(&format!("# gelcal {}", env!("CARGO_PKG_VERSION"))));
    assert!(csv.lines().any(|l| l.starts_with("# config-sha256 ") && l.len() == 16 + 64));
    let row = csv.lines().find(|l| l.starts_with("cal:quadratic,mean,")).unwrap();
    let value: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((value - 3.4).abs() < 1e-12, "{value}");
    assert!(out.with_extension("md").exists());
}

#[test]
fn infeasible_calibration_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    // responders sit in [0, 1]; most non-responders far to the right
    let mut text = String::from("y,x\n");
    for i in 0..20 {
        let x = i as f64 / 19.0;
        text.push_str(&format!("{},{x}\n", 1.0 + 2.0 * x + 0.1 * ((i % 3) as f64 - 1.0)));
    }
    for _ in 0..2 {
        text.push_str("NA,-1\n");
    }
    for _ in 0..20 {
        text.push_str("NA,100\n");
    }
    let data = write(&dir.path().join("hostile.csv"), &text);
    let o = gelcal(&[
        "estimate", "--input", &data, "--propensity", "r ~ 1", "--model", "y ~ x", "--estimator", "cal", "--rho",
        "el", "--no-box",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_json(&o)["error"], "InfeasibleCalibration");

    let o = gelcal(&["estimate", "--input", &data, "--propensity", "r ~ w", "--model", "y ~ x"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"], "UnknownColumn");
}

#[test]
fn large_replicate_with_correct_models_is_close_to_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let rep = generate_kang_schafer(&KangSchaferConfig {
        n: 100_000,
        interaction: false,
        seed: 3,
    })
    .unwrap();
    let path = dir.path().join("ks.csv");
    save_csv(&rep.observed, &path, "NA").unwrap();
    let o = gelcal(&[
        "estimate",
        "--input",
        path.to_str().unwrap(),
        "--propensity",
        "r ~ z1 + z2 + z3 + z4",
        "--model",
        "y ~ z1 + z2 + z3 + z4",
        "--estimator",
        "cal",
        "--estimator",
        "ipw",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("| cal:quadratic | mean |")).unwrap();
    let value: f64 = row.split('|').nth(3).unwrap().trim().parse().unwrap();
    assert!((value - 210.0).abs() < 0.5, "{value}");
}

#[test]
fn simulate_writes_tables_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        &dir.path().join("run.toml"),
        "seed = 4\nreps = 6\n\n[simulation]\nstudy = \"nested-models\"\nn = 200\n",
    );
    let mut outputs = Vec::new();
    for (threads, name) in [("1", "a.csv"), ("3", "b.csv")] {
        let out = dir.path().join(name);
        let o = gelcal(&[
            "simulate",
            "--config",
            &config,
            "--seed",
            "9",
            "--parallelism",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("## nested-models (n=200, 6 replicates)"));
        outputs.push(fs::read_to_string(&out).unwrap());
        let md = fs::read_to_string(out.with_extension("md")).unwrap();
        assert!(md.starts_with("<!--\ngelcal "));
    }
    assert!(outputs[0].contains("# seed 9\n"));
    assert!(outputs[0].contains("cal:el:models=4"));
    // thread count is not part of the results, only of the config hash
    let body = |s: &str| s.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&outputs[0]), body(&outputs[1]));
}

#[test]
fn resample_study_on_synthetic_data() {
    let o = gelcal(&["resample-study", "--synthetic-n", "600", "--reps", "5", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("resampling study (N=600, 5 subsamples)"));
    assert!(out.contains("cal:both"));
}
