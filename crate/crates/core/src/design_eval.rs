//! Design-stage evaluation of every selection rule on a fixed historical pool.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::control_prior;
use crate::design::{
    oc_for_boundary, probability_of_success, rate_grid, worst_case_selection, BayesDesign, OcCurve,
    WorstCase,
};
use crate::error::{Error, Result};
use crate::map_prior::{HierarchicalHyperPrior, MapFitSettings};
use crate::mixture::BetaMixture;
use crate::pool::HistoricalPool;
use crate::selection::{select, PlanningAssumptions, SelectionRule};

fn d_ratio() -> u64 {
    4
}

/// Prospective size with `n_c = round(n_total / (ratio + 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSize {
    pub n_total: u64,
    #[serde(default = "d_ratio")]
    pub ratio: u64,
}

impl DesignSize {
    pub fn arms(&self) -> Result<(u64, u64)> {
        if self.ratio == 0 {
            return Err(Error::Config("ratio must be positive".into()));
        }
        let n_c = (self.n_total as f64 / (self.ratio + 1) as f64).round() as u64;
        if n_c == 0 || n_c >= self.n_total {
            return Err(Error::Config(format!(
                "n_total {} with ratio {}:1 leaves an empty arm",
                self.n_total, self.ratio
            )));
        }
        Ok((self.n_total - n_c, n_c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

fn d_designs() -> Vec<DesignSize> {
    vec![DesignSize {
        n_total: 30,
        ratio: 4,
    }]
}
fn d_gamma() -> f64 {
    0.975
}
fn d_w_r() -> f64 {
    0.1
}
fn d_pi_t() -> f64 {
    0.60
}
fn d_pi_c() -> f64 {
    0.25
}
fn d_grid() -> GridSpec {
    GridSpec {
        lo: 0.01,
        hi: 0.60,
        step: 0.005,
    }
}
fn d_threshold() -> f64 {
    0.25
}
fn d_seed() -> u64 {
    3
}
fn d_true() -> bool {
    true
}
fn d_worst_map() -> MapFitSettings {
    MapFitSettings::simulation()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignEvalConfig {
    #[serde(default = "d_designs")]
    pub designs: Vec<DesignSize>,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_w_r")]
    pub w_r: f64,
    #[serde(default)]
    pub hyper: HierarchicalHyperPrior,
    /// Planning rates; power curves use `π_t = π_c + (pi_t_star - pi_c_star)`.
    #[serde(default = "d_pi_t")]
    pub pi_t_star: f64,
    #[serde(default = "d_pi_c")]
    pub pi_c_star: f64,
    #[serde(default = "d_grid")]
    pub grid: GridSpec,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    #[serde(default = "d_seed")]
    pub random_seed: u64,
    #[serde(default = "d_true")]
    pub worst_case: bool,
    /// Fit resolution of the `2^k` subset priors of the worst case.
    #[serde(default = "d_worst_map")]
    pub worst_case_map: MapFitSettings,
}

impl Default for DesignEvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl DesignEvalConfig {
    pub fn rd_alt(&self) -> f64 {
        self.pi_t_star - self.pi_c_star
    }

    pub fn validate(&self) -> Result<()> {
        if self.designs.is_empty() {
            return Err(Error::Config("no designs given".into()));
        }
        for d in &self.designs {
            d.arms()?;
        }
        if !(self.w_r > 0.0 && self.w_r < 1.0) || !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("w_r and gamma must lie in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0,1], got {}",
                self.threshold
            )));
        }
        rate_grid(self.grid.lo, self.grid.hi, self.grid.step)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.hyper
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEvaluation {
    pub rule: String,
    /// 1-based trial numbers.
    pub selected: Vec<usize>,
    pub pos: f64,
    pub curve: OcCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEvaluation {
    pub design_id: String,
    pub n_t: u64,
    pub n_c: u64,
    pub rules: Vec<RuleEvaluation>,
    pub worst_case: Option<WorstCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEvalReport {
    pub config: DesignEvalConfig,
    pub designs: Vec<DesignEvaluation>,
    pub warnings: Vec<String>,
}

fn rules_for(
    pool: &HistoricalPool,
    cfg: &DesignEvalConfig,
    plan: PlanningAssumptions,
    warnings: &mut Vec<String>,
) -> Vec<SelectionRule> {
    let all = [
        SelectionRule::Full,
        SelectionRule::Random,
        SelectionRule::DropTheBest,
        SelectionRule::Threshold {
            threshold: cfg.threshold,
        },
        SelectionRule::OptimalPower { planning: plan },
        SelectionRule::MonotoneOptimalPower { planning: plan },
        SelectionRule::Separate,
    ];
    let k = pool.len();
    all.into_iter()
        .filter(|r| {
            let needs = match r {
                SelectionRule::Separate => 0,
                SelectionRule::Random | SelectionRule::DropTheBest => 2,
                _ => 1,
            };
            if k < needs {
                warnings.push(format!(
                    "rule `{}` skipped: pool has {k} trial(s)",
                    r.name()
                ));
            }
            k >= needs
        })
        .collect()
}

/// Conditional type-I error and power curves and probability of success of each rule's
/// design, plus the pointwise worst case over all subsets.
pub fn evaluate_designs(pool: &HistoricalPool, cfg: &DesignEvalConfig) -> Result<DesignEvalReport> {
    cfg.validate()?;
    let grid = rate_grid(cfg.grid.lo, cfg.grid.hi, cfg.grid.step)?;
    let settings = MapFitSettings::fine();
    let mut warnings = Vec::new();
    let mut designs = Vec::new();
    for size in &cfg.designs {
        let (n_t, n_c) = size.arms()?;
        let plan = PlanningAssumptions::new(cfg.pi_t_star, cfg.pi_c_star, n_t, n_c, cfg.gamma)?;
        let design = BayesDesign {
            n_t,
            n_c,
            gamma: cfg.gamma,
            w_r: cfg.w_r,
            hyper: cfg.hyper,
        };
        let mut rules = Vec::new();
        for rule in rules_for(pool, cfg, plan, &mut warnings) {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
            let sel = select(pool, &rule, &mut rng)?;
            let prior = control_prior(&sel.selected, cfg.w_r, &cfg.hyper, &settings)?;
            let b = design.boundary(&prior)?;
            rules.push(RuleEvaluation {
                rule: rule.name().into(),
                selected: sel
                    .mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| i + 1)
                    .collect(),
                pos: probability_of_success(&prior, &BetaMixture::uniform(), n_t, n_c, cfg.gamma)?,
                curve: oc_for_boundary(&b, &grid, cfg.rd_alt())?,
            });
        }
        let worst_case = if cfg.worst_case && !pool.is_empty() {
            Some(worst_case_selection(
                pool,
                &design,
                &cfg.worst_case_map,
                &grid,
            )?)
        } else {
            None
        };
        designs.push(DesignEvaluation {
            design_id: format!("n{}-r{}", size.n_total, size.ratio),
            n_t,
            n_c,
            rules,
            worst_case,
        });
    }
    if pool.is_empty() {
        warnings.push("historical pool is empty; only the separate design is evaluated".into());
    }
    Ok(DesignEvalReport {
        config: cfg.clone(),
        designs,
        warnings,
    })
}

#[derive(Serialize)]
struct CurveRow<'a> {
    design_id: &'a str,
    rule: &'a str,
    pi_c: f64,
    t1e: f64,
    power: Option<f64>,
}

/// Long-format curves; the worst-case rows carry no power.
pub fn write_curves_csv<W: Write>(report: &DesignEvalReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for d in &report.designs {
        for r in &d.rules {
            for i in 0..r.curve.grid.len() {
                w.serialize(CurveRow {
                    design_id: &d.design_id,
                    rule: &r.rule,
                    pi_c: r.curve.grid[i],
                    t1e: r.curve.t1e[i],
                    power: Some(r.curve.power[i]),
                })?;
            }
        }
        if let Some(wc) = &d.worst_case {
            for i in 0..wc.grid.len() {
                w.serialize(CurveRow {
                    design_id: &d.design_id,
                    rule: "worst_case",
                    pi_c: wc.grid[i],
                    t1e: wc.t1e[i],
                    power: None,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PosRule<'a> {
    rule: &'a str,
    selected: &'a [usize],
    pos: f64,
}

#[derive(Serialize)]
struct PosDesign<'a> {
    design_id: &'a str,
    n_t: u64,
    n_c: u64,
    rules: Vec<PosRule<'a>>,
    worst_case_masks: Option<&'a [u32]>,
}

/// Probability of success per design and rule, with the worst-case subset masks.
pub fn pos_json(report: &DesignEvalReport) -> Result<String> {
    let designs: Vec<PosDesign> = report
        .designs
        .iter()
        .map(|d| PosDesign {
            design_id: &d.design_id,
            n_t: d.n_t,
            n_c: d.n_c,
            rules: d
                .rules
                .iter()
                .map(|r| PosRule {
                    rule: &r.rule,
                    selected: &r.selected,
                    pos: r.pos,
                })
                .collect(),
            worst_case_masks: d.worst_case.as_ref().map(|w| w.masks.as_slice()),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&serde_json::json!({
        "config": report.config,
        "designs": designs,
    }))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_round_the_control_size() {
        let arms: Vec<_> = [30, 60, 300, 3000]
            .iter()
            .map(|&n| {
                DesignSize {
                    n_total: n,
                    ratio: 4,
                }
                .arms()
                .unwrap()
            })
            .collect();
        assert_eq!(arms, vec![(24, 6), (48, 12), (240, 60), (2400, 600)]);
        assert!(DesignSize {
            n_total: 1,
            ratio: 4
        }
        .arms()
        .is_err());
    }

    #[test]
    fn empty_pool_gives_separate_only() {
        let cfg = DesignEvalConfig {
            grid: GridSpec {
                lo: 0.1,
                hi: 0.3,
                step: 0.1,
            },
            ..Default::default()
        };
        let r = evaluate_designs(&HistoricalPool::empty(), &cfg).unwrap();
        assert_eq!(r.designs[0].rules.len(), 1);
        assert_eq!(r.designs[0].rules[0].rule, "separate");
        assert!(r.designs[0].worst_case.is_none());
        assert!(!r.warnings.is_empty());
        let mut buf = Vec::new();
        write_curves_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "design_id,rule,pi_c,t1e,power"
        );
        assert_eq!(text.lines().count(), 4);
    }
}
