mod common;

use hybridrct::config::{parse_json, SimulateConfig};
use hybridrct::design_eval::{evaluate_designs, DesignEvalConfig};
use hybridrct::pool::HistoricalPool;
use hybridrct::sim::{
    generate_replicate, run_grid, scenario_grid, write_oc_csv, FamilySpec, OcRecord,
};

fn spec(json: &str) -> FamilySpec {
    serde_json::from_str(json).unwrap()
}

#[test]
fn historical_rates_have_the_logit_normal_mean() {
    let cfg = &scenario_grid(&[spec(
        r#"{"family":"exchangeable","tau":[0.3],"k":[8],"n_hc":[30],"ratio":[1]}"#,
    )])
    .unwrap()[0];
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..12_500 {
        for t in generate_replicate(cfg, 11, r).unwrap().pool.trials() {
            sum += t.rate();
            count += 1;
        }
    }
    let b0 = (0.2f64 / 0.8).ln();
    let want = common::tanh_sinh(-12.0, 12.0, |z| {
        (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / (1.0 + (-(b0 + 0.3 * z)).exp())
    });
    assert!(
        (sum / count as f64 - want).abs() < 0.005,
        "{} vs {want}",
        sum / count as f64
    );
}

#[test]
fn prospective_rates_follow_the_scenario() {
    let cfg = &scenario_grid(&[spec(
        r#"{"family":"shift","tau":[0.5],"k":[4],"n_hc":[30],"ratio":[1],"pi_c":[0.4]}"#,
    )])
    .unwrap()[0];
    let (mut c, mut t) = (0.0, 0.0);
    let reps = 4000;
    for r in 0..reps {
        let rep = generate_replicate(cfg, 5, r).unwrap();
        c += rep.alt.y_c as f64 / rep.alt.n_c as f64;
        t += rep.alt.y_t as f64 / rep.alt.n_t as f64;
    }
    let pi_t = cfg.treatment_rate(0.4);
    assert!((c / reps as f64 - 0.4).abs() < 0.01);
    assert!((t / reps as f64 - pi_t).abs() < 0.01);
}

fn small_run() -> Vec<OcRecord> {
    let cfg: SimulateConfig = parse_json(
        r#"{"settings":{"replicates":40,"seed":3},
            "families":[{"family":"exchangeable","tau":[0.1],"k":[4],"n_hc":[30],"ratio":[1]}]}"#,
    )
    .unwrap();
    run_grid(&cfg.scenarios().unwrap(), &cfg.settings)
        .unwrap()
        .0
}

#[test]
fn grid_runs_are_reproducible_across_pools() {
    let a = small_run();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(small_run);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    write_oc_csv(&a, &mut x).unwrap();
    write_oc_csv(&b, &mut y).unwrap();
    assert_eq!(x, y);
    // 7 rules x 2 methods x 2 hypotheses, each with at least its primary metric
    for rule in [
        "full",
        "random",
        "drop_best",
        "threshold",
        "optimal_power",
        "monotone_optimal_power",
        "separate",
    ] {
        for metric in ["t1e", "power", "bias", "rmse"] {
            assert!(
                a.iter().any(|r| r.rule == rule && r.metric == metric),
                "{rule} {metric}"
            );
        }
    }
    assert!(a
        .iter()
        .filter(|r| r.metric == "t1e" || r.metric == "power")
        .all(|r| (0.0..=1.0).contains(&r.value)));
}

#[test]
fn empty_pool_evaluates_the_separate_design_only() {
    let cfg: DesignEvalConfig = parse_json(r#"{"grid":{"lo":0.1,"hi":0.5,"step":0.1}}"#).unwrap();
    let report = evaluate_designs(&HistoricalPool::empty(), &cfg).unwrap();
    let d = &report.designs[0];
    assert_eq!(d.rules.len(), 1);
    assert_eq!(d.rules[0].rule, "separate");
    assert!(d.worst_case.is_none());
    assert!(!report.warnings.is_empty());
    assert!(d.rules[0].curve.t1e.iter().all(|&v| v <= 0.025));
}
