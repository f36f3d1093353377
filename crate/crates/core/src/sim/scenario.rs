//! Scenario definitions, the factor grid and the data-generating model.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::{binomial_inverse, stream, StreamRole};
use crate::analysis::ProspectiveData;
use crate::error::{Error, Result};
use crate::pool::HistoricalPool;
use crate::selection::{PlanningAssumptions, SelectionRule};

/// Historical mean response rate; `β₀ = logit(0.2)`.
pub const REFERENCE_RATE: f64 = 0.2;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Exchangeable,
    Shift,
    TimeTrend,
    LargeProspective,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Exchangeable => "exchangeable",
            Family::Shift => "shift",
            Family::TimeTrend => "time_trend",
            Family::LargeProspective => "large_prospective",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    Null,
    Alt,
}

impl Hypothesis {
    pub fn name(&self) -> &'static str {
        match self {
            Hypothesis::Null => "null",
            Hypothesis::Alt => "alt",
        }
    }
}

/// How the treatment effect is applied to the realised control rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectScale {
    /// Fixed log-odds shift `β₁ = logit(0.2 + rd) - logit(0.2)`.
    #[default]
    Logit,
    /// Fixed risk difference `π_t = π_c + rd`.
    Probability,
}

/// One simulated setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    pub family: Family,
    /// Between-trial standard deviation on the log-odds scale.
    pub tau: f64,
    pub k: usize,
    pub n_hc: u64,
    pub n_total: u64,
    /// Treatment:control allocation.
    pub ratio: u64,
    pub pi_c_target: f64,
    /// Risk difference under the alternative at the reference control rate.
    pub rd: f64,
    /// Log-odds drift per chronological step of the historical trials.
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub effect_scale: EffectScale,
    /// Set when a factor lies outside the studied levels.
    #[serde(default)]
    pub extrapolated: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("scenario `{}`: {msg}", self.id)));
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be non-negative, got {}", self.tau));
        }
        if self.k == 0 || self.k > crate::design::MAX_ENUMERATED_TRIALS {
            return bad(format!("k must lie in 1..=20, got {}", self.k));
        }
        if self.n_hc == 0 {
            return bad("n_hc must be positive".into());
        }
        if self.ratio == 0 {
            return bad("ratio must be positive".into());
        }
        if self.n_c() == 0 || self.n_t() == 0 {
            return bad(format!(
                "n_total {} with ratio {}:1 leaves an empty arm",
                self.n_total, self.ratio
            ));
        }
        if !(self.pi_c_target > 0.0 && self.pi_c_target < 1.0) {
            return bad(format!("pi_c must lie in (0,1), got {}", self.pi_c_target));
        }
        let pt = self.treatment_rate(self.pi_c_target);
        if !(self.rd >= 0.0 && REFERENCE_RATE + self.rd < 1.0 && pt < 1.0) {
            return bad(format!("rd {} is out of range", self.rd));
        }
        if !self.drift.is_finite() {
            return bad("drift must be finite".into());
        }
        Ok(())
    }

    pub fn n_c(&self) -> u64 {
        self.n_total / (self.ratio + 1)
    }

    pub fn n_t(&self) -> u64 {
        self.n_total - self.n_c()
    }

    pub fn beta0(&self) -> f64 {
        logit(REFERENCE_RATE)
    }

    pub fn beta1(&self) -> f64 {
        logit(REFERENCE_RATE + self.rd) - logit(REFERENCE_RATE)
    }

    /// Treatment rate under the alternative for a control rate `pi_c`.
    pub fn treatment_rate(&self, pi_c: f64) -> f64 {
        match self.effect_scale {
            EffectScale::Logit => expit(logit(pi_c) + self.beta1()),
            EffectScale::Probability => pi_c + self.rd,
        }
    }

    /// Planning values of the optimal-power rule: the scenario's own control and treatment
    /// rates, under both hypotheses.
    pub fn planning(&self, gamma: f64) -> Result<PlanningAssumptions> {
        PlanningAssumptions::new(
            self.treatment_rate(self.pi_c_target),
            self.pi_c_target,
            self.n_t(),
            self.n_c(),
            gamma,
        )
    }
}

/// One simulated historical pool and prospective trial under both hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub pool: HistoricalPool,
    pub pi_c: f64,
    pub pi_t_alt: f64,
    pub null: ProspectiveData,
    pub alt: ProspectiveData,
}

impl Replicate {
    pub fn data(&self, h: Hypothesis) -> &ProspectiveData {
        match h {
            Hypothesis::Null => &self.null,
            Hypothesis::Alt => &self.alt,
        }
    }

    /// Realised risk difference.
    pub fn true_rd(&self, h: Hypothesis) -> f64 {
        match h {
            Hypothesis::Null => 0.0,
            Hypothesis::Alt => self.pi_t_alt - self.pi_c,
        }
    }
}

impl ScenarioConfig {
    /// Risk difference at the target control rate.
    pub fn nominal_rd(&self, h: Hypothesis) -> f64 {
        match h {
            Hypothesis::Null => 0.0,
            Hypothesis::Alt => self.treatment_rate(self.pi_c_target) - self.pi_c_target,
        }
    }
}

/// Response rate of historical trial `i` (0-based, oldest first) with standardised random
/// effect `z`.
pub fn historical_rate(cfg: &ScenarioConfig, i: usize, z: f64) -> f64 {
    let steps = (cfg.k - i) as f64;
    expit(cfg.beta0() + cfg.drift * steps + cfg.tau * z)
}

/// Draws replicate `replicate` of `cfg`. The historical and prospective parts use separate
/// streams, so scenarios that share a seed share their random effects and uniforms.
pub fn generate_replicate(cfg: &ScenarioConfig, seed: u64, replicate: u64) -> Result<Replicate> {
    let mut hist = stream(seed, replicate, StreamRole::Historical);
    let z: Vec<f64> = (0..cfg.k).map(|_| hist.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..cfg.k).map(|_| hist.random::<f64>()).collect();
    let counts: Vec<(u64, u64)> = (0..cfg.k)
        .map(|i| {
            (
                binomial_inverse(cfg.n_hc, historical_rate(cfg, i, z[i]), v[i]),
                cfg.n_hc,
            )
        })
        .collect();
    let pool = HistoricalPool::from_counts(&counts)?;

    let mut pros = stream(seed, replicate, StreamRole::Prospective);
    let zc: f64 = pros.sample(StandardNormal);
    let (uc, ut): (f64, f64) = (pros.random(), pros.random());
    let pi_c = expit(logit(cfg.pi_c_target) + cfg.tau * zc);
    let pi_t_alt = cfg.treatment_rate(pi_c).min(1.0);
    let (n_t, n_c) = (cfg.n_t(), cfg.n_c());
    let y_c = binomial_inverse(n_c, pi_c, uc);
    Ok(Replicate {
        pool,
        pi_c,
        pi_t_alt,
        null: ProspectiveData::new(binomial_inverse(n_t, pi_c, ut), n_t, y_c, n_c)?,
        alt: ProspectiveData::new(binomial_inverse(n_t, pi_t_alt, ut), n_t, y_c, n_c)?,
    })
}

/// Selection rule as named in configuration; the optimal-power rules take their planning
/// values from the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    Full,
    Random,
    #[serde(rename = "drop_best")]
    DropTheBest,
    Threshold {
        threshold: f64,
    },
    OptimalPower,
    MonotoneOptimalPower,
    Separate,
}

impl RuleSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RuleSpec::Full => "full",
            RuleSpec::Random => "random",
            RuleSpec::DropTheBest => "drop_best",
            RuleSpec::Threshold { .. } => "threshold",
            RuleSpec::OptimalPower => "optimal_power",
            RuleSpec::MonotoneOptimalPower => "monotone_optimal_power",
            RuleSpec::Separate => "separate",
        }
    }

    pub fn resolve(&self, plan: PlanningAssumptions) -> SelectionRule {
        match *self {
            RuleSpec::Full => SelectionRule::Full,
            RuleSpec::Random => SelectionRule::Random,
            RuleSpec::DropTheBest => SelectionRule::DropTheBest,
            RuleSpec::Threshold { threshold } => SelectionRule::Threshold { threshold },
            RuleSpec::OptimalPower => SelectionRule::OptimalPower { planning: plan },
            RuleSpec::MonotoneOptimalPower => {
                SelectionRule::MonotoneOptimalPower { planning: plan }
            }
            RuleSpec::Separate => SelectionRule::Separate,
        }
    }

    /// Rules of the main comparison, with the 0.20 threshold.
    pub fn standard() -> Vec<RuleSpec> {
        vec![
            RuleSpec::Separate,
            RuleSpec::Full,
            RuleSpec::Random,
            RuleSpec::DropTheBest,
            RuleSpec::Threshold { threshold: 0.2 },
            RuleSpec::OptimalPower,
            RuleSpec::MonotoneOptimalPower,
        ]
    }
}

fn default_taus() -> Vec<f64> {
    vec![0.1, 0.3, 0.5]
}
fn default_ks() -> Vec<usize> {
    vec![4, 8]
}
fn default_n_hc() -> Vec<u64> {
    vec![30, 90]
}
fn default_ratios() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_rd() -> f64 {
    0.2
}
fn default_shift_rates() -> Vec<f64> {
    (0..13)
        .map(|i| ((0.15 + 0.05 * i as f64) * 100.0).round() / 100.0)
        .collect()
}
fn default_drift() -> f64 {
    -0.05
}
fn default_large_rds() -> Vec<f64> {
    vec![0.0635, 0.1152]
}
fn default_large_n_hc() -> Vec<u64> {
    vec![30, 60]
}
fn default_large_n_total() -> u64 {
    500
}
fn one_to_one() -> Vec<u64> {
    vec![1]
}
fn time_trend_k() -> usize {
    8
}
fn time_trend_n_hc() -> u64 {
    30
}
fn default_large_taus() -> Vec<f64> {
    vec![0.3]
}
fn default_large_ks() -> Vec<usize> {
    vec![8]
}

/// One scenario family with its factor levels; missing levels take the studied defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Exchangeable {
        #[serde(default = "default_taus")]
        tau: Vec<f64>,
        #[serde(default = "default_ks")]
        k: Vec<usize>,
        /// Each level couples with `n_total = 2 n_hc`.
        #[serde(default = "default_n_hc")]
        n_hc: Vec<u64>,
        #[serde(default = "default_ratios")]
        ratio: Vec<u64>,
        #[serde(default = "default_rd")]
        rd: f64,
        #[serde(default)]
        effect_scale: EffectScale,
    },
    Shift {
        #[serde(default = "default_taus")]
        tau: Vec<f64>,
        #[serde(default = "default_ks")]
        k: Vec<usize>,
        #[serde(default = "default_n_hc")]
        n_hc: Vec<u64>,
        #[serde(default = "default_ratios")]
        ratio: Vec<u64>,
        #[serde(default = "default_shift_rates")]
        pi_c: Vec<f64>,
        #[serde(default = "default_rd")]
        rd: f64,
        #[serde(default)]
        effect_scale: EffectScale,
    },
    TimeTrend {
        #[serde(default = "default_large_taus")]
        tau: Vec<f64>,
        #[serde(default = "time_trend_k")]
        k: usize,
        #[serde(default = "time_trend_n_hc")]
        n_hc: u64,
        #[serde(default = "one_to_one")]
        ratio: Vec<u64>,
        #[serde(default = "default_drift")]
        drift: f64,
        #[serde(default = "default_rd")]
        rd: f64,
        #[serde(default)]
        effect_scale: EffectScale,
    },
    LargeProspective {
        #[serde(default = "default_large_taus")]
        tau: Vec<f64>,
        #[serde(default = "default_large_ks")]
        k: Vec<usize>,
        #[serde(default = "default_large_n_hc")]
        n_hc: Vec<u64>,
        #[serde(default = "one_to_one")]
        ratio: Vec<u64>,
        #[serde(default = "default_large_rds")]
        rd: Vec<f64>,
        #[serde(default = "default_large_n_total")]
        n_total: u64,
        #[serde(default)]
        effect_scale: EffectScale,
    },
}

fn fmt_level(x: f64) -> String {
    let s = format!("{x:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[allow(clippy::too_many_arguments)]
fn make(
    family: Family,
    tau: f64,
    k: usize,
    n_hc: u64,
    n_total: u64,
    ratio: u64,
    pi_c: f64,
    rd: f64,
    drift: f64,
    effect_scale: EffectScale,
) -> Result<ScenarioConfig> {
    let studied_n_hc: &[u64] = if family == Family::LargeProspective {
        &[30, 60, 90]
    } else {
        &[30, 90]
    };
    let extrapolated = ![0.1, 0.3, 0.5].iter().any(|t| (t - tau).abs() < 1e-12)
        || ![4, 8].contains(&k)
        || !studied_n_hc.contains(&n_hc)
        || ![1, 2, 3].contains(&ratio)
        || !(0.15 - 1e-12..=0.75 + 1e-12).contains(&pi_c);
    let cfg = ScenarioConfig {
        id: format!(
            "{}-tau{}-k{k}-nhc{n_hc}-n{n_total}-r{ratio}-pc{}-rd{}",
            family.name(),
            fmt_level(tau),
            fmt_level(pi_c),
            fmt_level(rd)
        ),
        family,
        tau,
        k,
        n_hc,
        n_total,
        ratio,
        pi_c_target: pi_c,
        rd,
        drift,
        effect_scale,
        extrapolated,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Cross product of the factor levels of each family, in the order given.
pub fn scenario_grid(specs: &[FamilySpec]) -> Result<Vec<ScenarioConfig>> {
    let mut out = Vec::new();
    for spec in specs {
        match spec {
            FamilySpec::Exchangeable {
                tau,
                k,
                n_hc,
                ratio,
                rd,
                effect_scale,
            } => {
                for &t in tau {
                    for &kk in k {
                        for &n in n_hc {
                            for &r in ratio {
                                out.push(make(
                                    Family::Exchangeable,
                                    t,
                                    kk,
                                    n,
                                    2 * n,
                                    r,
                                    REFERENCE_RATE,
                                    *rd,
                                    0.0,
                                    *effect_scale,
                                )?);
                            }
                        }
                    }
                }
            }
            FamilySpec::Shift {
                tau,
                k,
                n_hc,
                ratio,
                pi_c,
                rd,
                effect_scale,
            } => {
                for &t in tau {
                    for &kk in k {
                        for &n in n_hc {
                            for &r in ratio {
                                for &p in pi_c {
                                    out.push(make(
                                        Family::Shift,
                                        t,
                                        kk,
                                        n,
                                        2 * n,
                                        r,
                                        p,
                                        *rd,
                                        0.0,
                                        *effect_scale,
                                    )?);
                                }
                            }
                        }
                    }
                }
            }
            FamilySpec::TimeTrend {
                tau,
                k,
                n_hc,
                ratio,
                drift,
                rd,
                effect_scale,
            } => {
                if *k != 8 || *n_hc != 30 {
                    return Err(Error::Config(format!(
                        "time_trend is defined for k = 8 and n_hc = 30 only, got k = {k}, n_hc = {n_hc}"
                    )));
                }
                for &t in tau {
                    for &r in ratio {
                        out.push(make(
                            Family::TimeTrend,
                            t,
                            *k,
                            *n_hc,
                            2 * n_hc,
                            r,
                            REFERENCE_RATE,
                            *rd,
                            *drift,
                            *effect_scale,
                        )?);
                    }
                }
            }
            FamilySpec::LargeProspective {
                tau,
                k,
                n_hc,
                ratio,
                rd,
                n_total,
                effect_scale,
            } => {
                for &t in tau {
                    for &kk in k {
                        for &n in n_hc {
                            for &r in ratio {
                                for &d in rd {
                                    out.push(make(
                                        Family::LargeProspective,
                                        t,
                                        kk,
                                        n,
                                        *n_total,
                                        r,
                                        REFERENCE_RATE,
                                        d,
                                        0.0,
                                        *effect_scale,
                                    )?);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut ids: Vec<&str> = out.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(
            "scenario grid contains duplicate settings".into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(js: &str) -> FamilySpec {
        serde_json::from_str(js).unwrap()
    }

    #[test]
    fn default_grids_have_studied_sizes() {
        let g = scenario_grid(&[spec(r#"{"family":"exchangeable"}"#)]).unwrap();
        assert_eq!(g.len(), 36);
        assert!(g.iter().all(|c| c.n_total == 2 * c.n_hc && !c.extrapolated));
        let s = scenario_grid(&[spec(
            r#"{"family":"shift","tau":[0.3],"k":[8],"n_hc":[30],"ratio":[1]}"#,
        )])
        .unwrap();
        assert_eq!(s.len(), 13);
        assert!((s[12].pi_c_target - 0.75).abs() < 1e-12);
        let l = scenario_grid(&[spec(r#"{"family":"large_prospective","n_hc":[30]}"#)]).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!((l[0].n_t(), l[0].n_c()), (250, 250));
        assert!((l[0].rd - 0.0635).abs() < 1e-12);
    }

    #[test]
    fn allocation_rounds_control_down() {
        let g = scenario_grid(&[spec(
            r#"{"family":"exchangeable","tau":[0.3],"k":[8],"n_hc":[30]}"#,
        )])
        .unwrap();
        let arms: Vec<_> = g.iter().map(|c| (c.n_t(), c.n_c())).collect();
        assert_eq!(arms, vec![(30, 30), (40, 20), (45, 15)]);
    }

    #[test]
    fn coupling_and_fields_are_checked() {
        assert!(scenario_grid(&[spec(r#"{"family":"time_trend","k":4}"#)]).is_err());
        assert!(
            serde_json::from_str::<FamilySpec>(r#"{"family":"exchangeable","n_total":[60]}"#)
                .is_err()
        );
        let x = scenario_grid(&[spec(
            r#"{"family":"exchangeable","tau":[0.7],"k":[8],"n_hc":[30],"ratio":[1]}"#,
        )])
        .unwrap();
        assert!(x[0].extrapolated);
    }

    #[test]
    fn zero_heterogeneity_gives_exact_rates() {
        let mut cfg = scenario_grid(&[spec(r#"{"family":"time_trend","tau":[0.0]}"#)])
            .unwrap()
            .remove(0);
        let r = generate_replicate(&cfg, 1, 0).unwrap();
        assert_eq!(r.pi_c, 0.2);
        assert_eq!(r.pool.len(), 8);
        assert!((historical_rate(&cfg, 0, 0.0) - 0.1436).abs() < 1e-4);
        assert!((historical_rate(&cfg, 7, 0.0) - 0.192).abs() < 5e-4);
        cfg.rd = 0.0;
        let r0 = generate_replicate(&cfg, 1, 0).unwrap();
        assert_eq!(r0.null, r0.alt);
        assert_eq!(r0.true_rd(Hypothesis::Alt), 0.0);
    }

    #[test]
    fn scenarios_share_random_effects() {
        let g = scenario_grid(&[
            spec(r#"{"family":"exchangeable","tau":[0.3],"k":[8],"n_hc":[30],"ratio":[1]}"#),
            spec(r#"{"family":"time_trend"}"#),
        ])
        .unwrap();
        for rep in 0..20 {
            let a = generate_replicate(&g[0], 9, rep).unwrap();
            let b = generate_replicate(&g[1], 9, rep).unwrap();
            assert_eq!(a.null, b.null);
            assert_eq!(a.alt, b.alt);
            // negative drift can only lower the historical counts
            for (x, y) in a.pool.trials().iter().zip(b.pool.trials()) {
                assert!(y.responders <= x.responders);
            }
        }
    }
}
