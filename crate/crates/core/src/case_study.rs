//! Reanalysis of the bundled ankylosing spondylitis trial under every selection rule.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{analyze_bayes_with_prior, analyze_ttp, control_prior, ProspectiveData};
use crate::design::probability_of_success;
use crate::error::{Error, Result};
use crate::map_prior::{HierarchicalHyperPrior, MapFitSettings};
use crate::mixture::BetaMixture;
use crate::pool::{read_pool_csv, LabeledPool};
use crate::selection::{select, PlanningAssumptions, SelectionResult, SelectionRule};

/// Eight historical placebo arms, oldest first.
pub const AS_CONTROLS_CSV: &str = include_str!("../data/as_controls.csv");
pub const AS_CONTROLS_SHA256: &str =
    "c96affdcd9c55038149a878f2989f0e3869ae8348ed6bd17012e080491472ebb";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses the dataset after checking its checksum.
pub fn load_as_controls(bytes: &[u8]) -> Result<LabeledPool> {
    let got = sha256_hex(bytes);
    if got != AS_CONTROLS_SHA256 {
        return Err(Error::Config(format!(
            "historical dataset checksum mismatch: expected {AS_CONTROLS_SHA256}, got {got}"
        )));
    }
    read_pool_csv(bytes)
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
fn d_threshold() -> f64 {
    0.25
}
fn d_pi_t() -> f64 {
    0.60
}
fn d_pi_c() -> f64 {
    0.25
}
fn d_data() -> [u64; 4] {
    [14, 24, 1, 6]
}
fn d_seed() -> u64 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseStudyConfig {
    #[serde(default = "d_w_r")]
    pub w_r: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_alpha_pre")]
    pub alpha_pre: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    /// Planning treatment rate of the optimal-power rule.
    #[serde(default = "d_pi_t")]
    pub pi_t_star: f64,
    #[serde(default = "d_pi_c")]
    pub pi_c_star: f64,
    /// `[y_t, n_t, y_c, n_c]`.
    #[serde(default = "d_data")]
    pub data: [u64; 4],
    /// Seeds the random rule; the default drops the oldest trial.
    #[serde(default = "d_seed")]
    pub random_seed: u64,
    #[serde(default)]
    pub hyper: HierarchicalHyperPrior,
}

impl Default for CaseStudyConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl CaseStudyConfig {
    pub fn prospective(&self) -> Result<ProspectiveData> {
        let [y_t, n_t, y_c, n_c] = self.data;
        ProspectiveData::new(y_t, n_t, y_c, n_c)
    }

    pub fn rules(&self) -> Result<Vec<SelectionRule>> {
        let d = self.prospective()?;
        let planning =
            PlanningAssumptions::new(self.pi_t_star, self.pi_c_star, d.n_t, d.n_c, self.gamma)?;
        Ok(vec![
            SelectionRule::Full,
            SelectionRule::Random,
            SelectionRule::DropTheBest,
            SelectionRule::Threshold {
                threshold: self.threshold,
            },
            SelectionRule::OptimalPower { planning },
            SelectionRule::Separate,
        ])
    }
}

/// One row of the Bayesian results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesRow {
    pub rule: String,
    pub n_selected: usize,
    /// 1-based trial numbers joined by `;`.
    pub selected: String,
    pub pos: f64,
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub probability: f64,
    pub success: bool,
    pub ess: f64,
}

/// One row of the test-then-pool results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtpRow {
    pub rule: String,
    pub n_selected: usize,
    pub selected: String,
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    pub pooled: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub config: CaseStudyConfig,
    pub bayes: Vec<BayesRow>,
    pub ttp: Vec<TtpRow>,
}

/// Pooled-arithmetic consistency check: full-selection test-then-pool estimate of 0.337.
pub fn check_dataset(pool: &LabeledPool, cfg: &CaseStudyConfig) -> Result<()> {
    let r = analyze_ttp(&pool.pool, &cfg.prospective()?, cfg.alpha_pre, cfg.alpha)?;
    if (r.rd_estimate * 1000.0).round() != 337.0 {
        return Err(Error::Config(format!(
            "historical dataset inconsistent: full-selection estimate {:.4}, expected 0.337",
            r.rd_estimate
        )));
    }
    Ok(())
}

fn selections(
    pool: &LabeledPool,
    cfg: &CaseStudyConfig,
) -> Result<Vec<(SelectionRule, SelectionResult, String)>> {
    cfg.rules()?
        .into_iter()
        .map(|rule| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
            let sel = select(&pool.pool, &rule, &mut rng)?;
            let selected = sel
                .mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| (i + 1).to_string())
                .collect::<Vec<_>>()
                .join(";");
            Ok((rule, sel, selected))
        })
        .collect()
}

fn ttp_row(
    rule: &SelectionRule,
    sel: &SelectionResult,
    selected: String,
    data: &ProspectiveData,
    cfg: &CaseStudyConfig,
) -> Result<TtpRow> {
    let t = analyze_ttp(&sel.selected, data, cfg.alpha_pre, cfg.alpha)?;
    let (lo, hi) = t.interval.expect("TTP interval");
    Ok(TtpRow {
        rule: rule.name().into(),
        n_selected: sel.selected.len(),
        selected,
        estimate: t.rd_estimate,
        ci_lower: lo,
        ci_upper: hi,
        p_value: t.p_value.expect("TTP p-value"),
        pooled: t.pooled.unwrap_or(false),
        success: t.success,
    })
}

/// Test-then-pool rows only; no prior fitting.
pub fn run_case_study_ttp(pool: &LabeledPool, cfg: &CaseStudyConfig) -> Result<Vec<TtpRow>> {
    let data = cfg.prospective()?;
    selections(pool, cfg)?
        .into_iter()
        .map(|(rule, sel, selected)| ttp_row(&rule, &sel, selected, &data, cfg))
        .collect()
}

/// Applies every rule, analyses the prospective data with both methods and computes the
/// design-stage probability of success of each rule's design.
pub fn run_case_study(pool: &LabeledPool, cfg: &CaseStudyConfig) -> Result<CaseStudyReport> {
    let data = cfg.prospective()?;
    let settings = MapFitSettings::fine();
    let mut bayes = Vec::new();
    let mut ttp = Vec::new();
    for (rule, sel, selected) in selections(pool, cfg)? {
        let n_selected = sel.selected.len();
        let prior = control_prior(&sel.selected, cfg.w_r, &cfg.hyper, &settings)?;
        let b = analyze_bayes_with_prior(&prior, &data, cfg.gamma, true, n_selected > 0)?;
        let pos = probability_of_success(
            &prior,
            &BetaMixture::uniform(),
            data.n_t,
            data.n_c,
            cfg.gamma,
        )?;
        let (lo, hi) = b.interval.expect("interval requested");
        bayes.push(BayesRow {
            rule: rule.name().into(),
            n_selected,
            selected: selected.clone(),
            pos,
            estimate: b.rd_estimate,
            ci_lower: lo,
            ci_upper: hi,
            probability: b.posterior_prob.expect("Bayesian result"),
            success: b.success,
            ess: b.ess.unwrap_or(0.0),
        });
        ttp.push(ttp_row(&rule, &sel, selected, &data, cfg)?);
    }
    Ok(CaseStudyReport {
        config: cfg.clone(),
        bayes,
        ttp,
    })
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_data_passes_checks() {
        let pool = load_as_controls(AS_CONTROLS_CSV.as_bytes()).unwrap();
        assert_eq!(pool.pool.len(), 8);
        check_dataset(&pool, &CaseStudyConfig::default()).unwrap();
        let mut tampered = AS_CONTROLS_CSV.to_string();
        tampered.push('\n');
        assert!(matches!(
            load_as_controls(tampered.as_bytes()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pinned_seed_drops_the_oldest_trial() {
        let pool = load_as_controls(AS_CONTROLS_CSV.as_bytes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(CaseStudyConfig::default().random_seed);
        let sel = select(&pool.pool, &SelectionRule::Random, &mut rng).unwrap();
        assert_eq!(sel.rng_draw, Some(0));
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<CaseStudyConfig>(r#"{"wr":0.2}"#).is_err());
        let c: CaseStudyConfig = serde_json::from_str(r#"{"w_r":0.2}"#).unwrap();
        assert_eq!((c.w_r, c.threshold), (0.2, 0.25));
    }
}
