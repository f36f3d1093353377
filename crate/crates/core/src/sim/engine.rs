//! Replicate loop, prior caching and aggregation into operating characteristics.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::{stream, StreamRole};
use super::scenario::{generate_replicate, Hypothesis, Replicate, RuleSpec, ScenarioConfig};
use crate::analysis::{analyze_bayes_with_prior, analyze_ttp, control_prior};
use crate::error::{Error, Result};
use crate::map_prior::{
    fit_map_prior_with, map_predictive, HierarchicalHyperPrior, MapFitSettings,
};
use crate::mixture::{ess_elir, BetaMixture};
use crate::pool::HistoricalPool;
use crate::selection::{optimal_power_select_cached, select, CpCache, SelectionRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RobustMap,
    TestThenPool,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::RobustMap => "robust_map",
            Method::TestThenPool => "test_then_pool",
        }
    }
}

fn d_seed() -> u64 {
    20240601
}
fn d_replicates() -> u64 {
    1000
}
fn d_w_r() -> f64 {
    0.1
}
fn d_gamma() -> f64 {
    0.975
}
fn d_alpha_pre() -> f64 {
    0.10
}
fn d_alpha() -> f64 {
    0.025
}
fn d_map() -> MapFitSettings {
    MapFitSettings::simulation()
}
fn d_rules() -> Vec<RuleSpec> {
    RuleSpec::standard()
}
fn d_methods() -> Vec<Method> {
    vec![Method::RobustMap, Method::TestThenPool]
}
fn d_hypotheses() -> Vec<Hypothesis> {
    vec![Hypothesis::Null, Hypothesis::Alt]
}
fn d_true() -> bool {
    true
}

/// Reference value for bias and RMSE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasReference {
    /// Risk difference at the target control rate, fixed across replicates.
    #[default]
    Nominal,
    /// Risk difference of the replicate's realised response rates.
    Realized,
}

/// Run-level settings shared by every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_replicates")]
    pub replicates: u64,
    #[serde(default = "d_w_r")]
    pub w_r: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Two-sided level of the test-then-pool compatibility test.
    #[serde(default = "d_alpha_pre")]
    pub alpha_pre: f64,
    /// One-sided level of the final Fisher test.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub hyper: HierarchicalHyperPrior,
    #[serde(default = "d_map")]
    pub map: MapFitSettings,
    #[serde(default = "d_rules")]
    pub rules: Vec<RuleSpec>,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_hypotheses")]
    pub hypotheses: Vec<Hypothesis>,
    /// Report the mean prior effective sample size of the robust MAP priors.
    #[serde(default = "d_true")]
    pub ess: bool,
    #[serde(default)]
    pub bias_reference: BiasReference,
}

impl Default for SimSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replicates == 0 {
            return bad("replicates must be positive".into());
        }
        if !(self.w_r > 0.0 && self.w_r < 1.0) {
            return bad(format!("w_r must lie in (0,1), got {}", self.w_r));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("alpha_pre", self.alpha_pre),
            ("alpha", self.alpha),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0,1), got {v}"));
            }
        }
        if self.rules.is_empty() || self.methods.is_empty() || self.hypotheses.is_empty() {
            return bad("rules, methods and hypotheses must be non-empty".into());
        }
        for r in &self.rules {
            if let RuleSpec::Threshold { threshold } = r {
                if !(0.0..=1.0).contains(threshold) {
                    return bad(format!("threshold must lie in [0,1], got {threshold}"));
                }
            }
        }
        self.hyper
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    fn cells(&self) -> usize {
        self.rules.len() * self.methods.len() * self.hypotheses.len()
    }

    fn cell(&self, r: usize, m: usize, h: usize) -> usize {
        (r * self.methods.len() + m) * self.hypotheses.len() + h
    }
}

/// A robust MAP control prior and its effective sample size.
#[derive(Debug, Clone)]
pub struct CachedPrior {
    pub prior: BetaMixture,
    pub ess: Option<f64>,
}

/// Robust MAP priors keyed by the multiset of selected trials. The prior depends on the counts
/// only, so replicates and scenarios that select the same data reuse one fit.
pub struct PriorCache {
    w_r: f64,
    hyper: HierarchicalHyperPrior,
    settings: MapFitSettings,
    with_ess: bool,
    map: RwLock<HashMap<Vec<(u64, u64)>, Arc<CachedPrior>>>,
}

impl PriorCache {
    pub fn new(settings: &SimSettings) -> Self {
        PriorCache {
            w_r: settings.w_r,
            hyper: settings.hyper,
            settings: settings.map.clone(),
            with_ess: settings.ess,
            map: RwLock::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, selected: &HistoricalPool) -> Result<Arc<CachedPrior>> {
        let key = selected.content_key();
        if let Some(p) = self.map.read().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        // fit in key order so the entry does not depend on which replicate filled it
        let canonical = HistoricalPool::from_counts(&key)?;
        let prior = control_prior(&canonical, self.w_r, &self.hyper, &self.settings)?;
        let ess = match (self.with_ess, selected.is_empty()) {
            (false, _) => None,
            (true, true) => Some(0.0),
            (true, false) => Some(ess_elir(&prior)?),
        };
        let entry = Arc::new(CachedPrior { prior, ess });
        self.map
            .write()
            .expect("cache lock")
            .insert(key, entry.clone());
        Ok(entry)
    }
}

/// Result of one analysis in one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOutcome {
    pub success: bool,
    /// Estimated minus reference risk difference.
    pub error: f64,
    pub ess: Option<f64>,
    pub n_selected: usize,
}

/// Outcomes of every (rule, method, hypothesis) cell; `None` marks a failed analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub cells: Vec<Option<CellOutcome>>,
}

fn select_rule(
    rep: &Replicate,
    rule: &RuleSpec,
    cp: &CpCache,
    seed: u64,
    replicate: u64,
) -> Result<HistoricalPool> {
    let res = match rule.resolve(*cp.plan()) {
        SelectionRule::OptimalPower { .. } => optimal_power_select_cached(&rep.pool, cp, false)?,
        SelectionRule::MonotoneOptimalPower { .. } => {
            optimal_power_select_cached(&rep.pool, cp, true)?
        }
        r => {
            let mut rng = stream(seed, replicate, StreamRole::RandomSelection);
            select(&rep.pool, &r, &mut rng)?
        }
    };
    Ok(res.selected)
}

/// Simulates and analyses one replicate. Both hypotheses share the historical pool, the
/// control arm and the selections.
pub fn run_replicate(
    cfg: &ScenarioConfig,
    settings: &SimSettings,
    cp: &CpCache,
    priors: &PriorCache,
    replicate: u64,
) -> Result<ReplicateOutcome> {
    let rep = generate_replicate(cfg, settings.seed, replicate)?;
    let truth = |h| match settings.bias_reference {
        BiasReference::Nominal => cfg.nominal_rd(h),
        BiasReference::Realized => rep.true_rd(h),
    };
    let mut cells = vec![None; settings.cells()];
    for (ri, rule) in settings.rules.iter().enumerate() {
        let selected = match select_rule(&rep, rule, cp, settings.seed, replicate) {
            Ok(s) => s,
            Err(_) => continue,
        };
        for (mi, method) in settings.methods.iter().enumerate() {
            let prior = match method {
                Method::RobustMap => match priors.get(&selected) {
                    Ok(p) => Some(p),
                    Err(_) => continue,
                },
                Method::TestThenPool => None,
            };
            for (hi, &h) in settings.hypotheses.iter().enumerate() {
                let data = rep.data(h);
                let res = match &prior {
                    Some(p) => {
                        analyze_bayes_with_prior(&p.prior, data, settings.gamma, false, false)
                    }
                    None => analyze_ttp(&selected, data, settings.alpha_pre, settings.alpha),
                };
                if let Ok(a) = res {
                    cells[settings.cell(ri, mi, hi)] = Some(CellOutcome {
                        success: a.success,
                        error: a.rd_estimate - truth(h),
                        ess: prior.as_ref().and_then(|p| p.ess),
                        n_selected: selected.len(),
                    });
                }
            }
        }
    }
    Ok(ReplicateOutcome { replicate, cells })
}

/// One row of the long-format operating-characteristics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcRecord {
    pub scenario_id: String,
    pub family: String,
    pub tau: f64,
    pub k: usize,
    pub n_hc: u64,
    pub n_total: u64,
    pub ratio: u64,
    pub pi_c: f64,
    pub hypothesis: String,
    pub rule: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Summarises replicate outcomes per cell: rejection rate (`t1e` under the null, `power` under
/// the alternative), bias, RMSE, mean ESS, mean number of selected trials and the count of
/// failed replicates, each with its Monte Carlo standard error.
pub fn aggregate(
    cfg: &ScenarioConfig,
    settings: &SimSettings,
    outcomes: &[ReplicateOutcome],
) -> Result<Vec<OcRecord>> {
    let mut out = Vec::new();
    for (ri, rule) in settings.rules.iter().enumerate() {
        for (mi, method) in settings.methods.iter().enumerate() {
            for (hi, h) in settings.hypotheses.iter().enumerate() {
                let c = settings.cell(ri, mi, hi);
                let ok: Vec<&CellOutcome> = outcomes
                    .iter()
                    .filter_map(|o| o.cells[c].as_ref())
                    .collect();
                if ok.is_empty() {
                    return Err(Error::EmptyAggregate);
                }
                let failed = (outcomes.len() - ok.len()) as f64;
                let mut push = |metric: &str, value: f64, mc_se: f64| {
                    out.push(OcRecord {
                        scenario_id: cfg.id.clone(),
                        family: cfg.family.name().into(),
                        tau: cfg.tau,
                        k: cfg.k,
                        n_hc: cfg.n_hc,
                        n_total: cfg.n_total,
                        ratio: cfg.ratio,
                        pi_c: cfg.pi_c_target,
                        hypothesis: h.name().into(),
                        rule: rule.name().into(),
                        method: method.name().into(),
                        metric: metric.into(),
                        value,
                        mc_se,
                    })
                };
                let n = ok.len() as f64;
                let p = ok.iter().filter(|o| o.success).count() as f64 / n;
                let rej = match h {
                    Hypothesis::Null => "t1e",
                    Hypothesis::Alt => "power",
                };
                push(rej, p, (p * (1.0 - p) / n).sqrt());
                let errs: Vec<f64> = ok.iter().map(|o| o.error).collect();
                let (bias, bias_se) = mean_se(&errs);
                push("bias", bias, bias_se);
                let sq: Vec<f64> = errs.iter().map(|e| e * e).collect();
                let (mse, mse_se) = mean_se(&sq);
                let rmse = mse.sqrt();
                push(
                    "rmse",
                    rmse,
                    if rmse > 0.0 {
                        mse_se / (2.0 * rmse)
                    } else {
                        0.0
                    },
                );
                let ess: Vec<f64> = ok.iter().filter_map(|o| o.ess).collect();
                if !ess.is_empty() {
                    let (m, se) = mean_se(&ess);
                    push("mean_ess", m, se);
                }
                let sel: Vec<f64> = ok.iter().map(|o| o.n_selected as f64).collect();
                let (m, se) = mean_se(&sel);
                push("mean_selected", m, se);
                push("failed_replicates", failed, 0.0);
            }
        }
    }
    Ok(out)
}

/// Runs all replicates of one scenario in parallel. Output does not depend on the thread count.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    settings: &SimSettings,
    priors: &PriorCache,
) -> Result<Vec<OcRecord>> {
    cfg.validate()?;
    settings.validate()?;
    let cp = CpCache::new(cfg.planning(settings.gamma)?)?;
    let outcomes = (0..settings.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, settings, &cp, priors, r))
        .collect::<Result<Vec<_>>>()?;
    aggregate(cfg, settings, &outcomes)
}

/// Wall-clock time spent on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub id: String,
    pub seconds: f64,
}

/// Runs the scenarios in order with one prior cache. Failures are reported with the scenario id.
pub fn run_grid(
    scenarios: &[ScenarioConfig],
    settings: &SimSettings,
) -> Result<(Vec<OcRecord>, Vec<ScenarioRun>)> {
    settings.validate()?;
    let cache = PriorCache::new(settings);
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for cfg in scenarios {
        let start = std::time::Instant::now();
        let recs = run_scenario(cfg, settings, &cache).map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => crate::error::numeric("scenario", format!("{}: {other}", cfg.id)),
        })?;
        records.extend(recs);
        runs.push(ScenarioRun {
            id: cfg.id.clone(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((records, runs))
}

/// Writes records as CSV with a header row.
pub fn write_oc_csv<W: Write>(records: &[OcRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Compares the simulation-preset mixture mean with the fine predictive mean on 100 random
/// pools and returns the largest absolute difference; fails above 0.002.
pub fn self_check(settings: &SimSettings) -> Result<f64> {
    let fine = MapFitSettings {
        refine: false,
        ..MapFitSettings::fine()
    };
    let taus = [0.1, 0.3, 0.5];
    let worst = (0..100u64)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = stream(settings.seed, i, StreamRole::Historical);
            let k = 2 + (i % 7) as usize;
            let n = if i % 2 == 0 { 30 } else { 90 };
            let tau = taus[(i % 3) as usize];
            let counts: Vec<(u64, u64)> = (0..k)
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    let p = super::scenario::expit(super::scenario::logit(0.2) + tau * z);
                    (super::rng::binomial_inverse(n, p, rng.random()), n)
                })
                .collect();
            let pool = HistoricalPool::from_counts(&counts)?;
            let coarse = fit_map_prior_with(&pool, &settings.hyper, None, &settings.map)?
                .mixture
                .mean();
            let reference = map_predictive(&pool, &settings.hyper, &fine)?.mean();
            Ok((coarse - reference).abs())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if worst > 0.002 {
        return Err(crate::error::numeric(
            "simulation MAP preset",
            format!("mixture mean differs from the fine predictive by {worst:.4}"),
        ));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{scenario_grid, FamilySpec};

    fn scenario() -> ScenarioConfig {
        let spec: FamilySpec = serde_json::from_str(
            r#"{"family":"exchangeable","tau":[0.3],"k":[4],"n_hc":[30],"ratio":[1]}"#,
        )
        .unwrap();
        scenario_grid(&[spec]).unwrap().remove(0)
    }

    #[test]
    fn settings_defaults_and_unknown_fields() {
        let s = SimSettings::default();
        assert_eq!(
            (s.w_r, s.gamma, s.alpha_pre, s.alpha),
            (0.1, 0.975, 0.10, 0.025)
        );
        assert_eq!(s.rules.len(), 7);
        assert!(serde_json::from_str::<SimSettings>(r#"{"wr":0.2}"#).is_err());
    }

    #[test]
    fn small_run_is_complete_and_sane() {
        let settings = SimSettings {
            replicates: 40,
            ..Default::default()
        };
        let cfg = scenario();
        let recs = run_scenario(&cfg, &settings, &PriorCache::new(&settings)).unwrap();
        let get = |rule: &str, method: &str, metric: &str| {
            recs.iter()
                .find(|r| r.rule == rule && r.method == method && r.metric == metric)
                .unwrap()
                .value
        };
        assert_eq!(get("separate", "robust_map", "mean_selected"), 0.0);
        assert_eq!(get("full", "robust_map", "mean_selected"), 4.0);
        assert_eq!(get("random", "test_then_pool", "mean_selected"), 3.0);
        assert!(get("full", "robust_map", "power") >= get("full", "robust_map", "t1e"));
        assert!(recs.iter().all(|r| r.value.is_finite() && r.mc_se >= 0.0));
        assert!(recs
            .iter()
            .filter(|r| r.metric == "failed_replicates")
            .all(|r| r.value == 0.0));
    }

    #[test]
    fn csv_has_expected_header() {
        let settings = SimSettings {
            replicates: 5,
            rules: vec![RuleSpec::Full],
            ..Default::default()
        };
        let recs = run_scenario(&scenario(), &settings, &PriorCache::new(&settings)).unwrap();
        let mut buf = Vec::new();
        write_oc_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "scenario_id,family,tau,k,n_hc,n_total,ratio,pi_c,hypothesis,rule,method,metric,value,mc_se"
        );
    }
}
