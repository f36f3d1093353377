use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json");
const AS_DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/as_controls.csv");

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridrct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_simulation_writes_results_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let start = Instant::now();
    let o = run(&[
        "--threads",
        "2",
        "simulate",
        "--config",
        SMOKE,
        "--out",
        s(&out),
        "--replicates",
        "50",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed() < Duration::from_secs(60));
    let csv = fs::read_to_string(out.join("oc_results.csv")).unwrap();
    assert!(csv.starts_with("scenario_id,family,tau,k,n_hc,n_total,ratio,pi_c,hypothesis,rule,method,metric,value,mc_se"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["replicates"], 50);
    assert_eq!(manifest["threads"], 2);
    assert!(manifest["self_check_max_abs_diff"].as_f64().unwrap() <= 0.002);
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        "{\"families\": [{\"family\": \"exchangeable\", \"tau\": [0.3],}]}",
    )
    .unwrap();
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));

    fs::write(
        &cfg,
        r#"{"families": [{"family": "time_trend", "k": [4]}]}"#,
    )
    .unwrap();
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "design-eval",
        "--data",
        "/nonexistent/pool.csv",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "case-study",
        "--data",
        "/nonexistent/pool.csv",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tampered_case_study_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("as.csv");
    fs::write(
        &data,
        fs::read_to_string(AS_DATA)
            .unwrap()
            .replace("23,107", "24,107"),
    )
    .unwrap();
    let out = dir.path().join("cs");
    let o = run(&["case-study", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn case_study_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cs");
    let o = run(&["case-study", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bayes = fs::read_to_string(out.join("table6.csv")).unwrap();
    let ttp = fs::read_to_string(out.join("tableS6.csv")).unwrap();
    assert_eq!(bayes.lines().count(), 7);
    assert_eq!(ttp.lines().count(), 7);
    assert!(ttp
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("full,8,1;2;3;4;5;6;7;8,0.33"));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("dataset_sha256"));
}

#[test]
fn fit_map_prints_a_robust_mixture() {
    let o = run(&["fit-map", "--data", AS_DATA, "--w-r", "0.2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["trials"], 8);
    let w: f64 = v["robust_map"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["weight"].as_f64().unwrap())
        .sum();
    assert!((w - 1.0).abs() < 1e-9);
    assert!(v["robust_map_ess"].as_f64().unwrap() < v["map_ess"].as_f64().unwrap());
    let mean = v["map_mean"].as_f64().unwrap();
    assert!(mean > 0.15 && mean < 0.35);

    let o = run(&["fit-map", "--data", AS_DATA, "--w-r", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn design_eval_on_an_empty_pool_gives_the_separate_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.csv");
    fs::write(&data, "study,responders,size\n").unwrap();
    let cfg = dir.path().join("de.json");
    fs::write(&cfg, r#"{"grid": {"lo": 0.1, "hi": 0.5, "step": 0.1}}"#).unwrap();
    let out = dir.path().join("de");
    let o = run(&[
        "design-eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 6);
    assert!(curves
        .lines()
        .skip(1)
        .all(|l| l.starts_with("n30-r4,separate,")));
    let pos: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("pos.json")).unwrap()).unwrap();
    assert!(pos.to_string().contains("separate"));
}
