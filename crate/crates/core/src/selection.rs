//! Rules for choosing which historical control arms to borrow from.

use std::collections::HashMap;
use std::sync::RwLock;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{boundary, conditional_power, MAX_ENUMERATED_TRIALS};
use crate::error::{domain, Error, Result};
use crate::exact::BetaParams;
use crate::mixture::BetaMixture;
use crate::pool::HistoricalPool;

/// Planning values and design used by the conditional-power optimiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanningAssumptions {
    pub pi_t_star: f64,
    pub pi_c_star: f64,
    pub n_t: u64,
    pub n_c: u64,
    pub gamma: f64,
}

impl PlanningAssumptions {
    pub fn new(pi_t_star: f64, pi_c_star: f64, n_t: u64, n_c: u64, gamma: f64) -> Result<Self> {
        let p = PlanningAssumptions {
            pi_t_star,
            pi_c_star,
            n_t,
            n_c,
            gamma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, what) in [(self.pi_t_star, "pi_t_star"), (self.pi_c_star, "pi_c_star")] {
            if !(v > 0.0 && v < 1.0) {
                return Err(domain(format!("{what} must lie in (0,1), got {v}")));
            }
        }
        if self.n_t == 0 || self.n_c == 0 {
            return Err(domain("planned arm sizes must be positive"));
        }
        if !(self.gamma > 0.5 && self.gamma < 1.0) {
            return Err(domain(format!(
                "success threshold must lie in (0.5,1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionRule {
    Full,
    Random,
    #[serde(rename = "drop_best")]
    DropTheBest,
    Threshold {
        threshold: f64,
    },
    OptimalPower {
        planning: PlanningAssumptions,
    },
    MonotoneOptimalPower {
        planning: PlanningAssumptions,
    },
    Separate,
}

impl SelectionRule {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionRule::Full => "full",
            SelectionRule::Random => "random",
            SelectionRule::DropTheBest => "drop_best",
            SelectionRule::Threshold { .. } => "threshold",
            SelectionRule::OptimalPower { .. } => "optimal_power",
            SelectionRule::MonotoneOptimalPower { .. } => "monotone_optimal_power",
            SelectionRule::Separate => "separate",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SelectionRule::Threshold { threshold } if !(*threshold > 0.0 && *threshold < 1.0) => {
                Err(domain(format!(
                    "threshold must lie in (0,1), got {threshold}"
                )))
            }
            SelectionRule::OptimalPower { planning }
            | SelectionRule::MonotoneOptimalPower { planning } => planning.validate(),
            _ => Ok(()),
        }
    }

    /// Whether the rule looks at the historical outcomes.
    pub fn is_outcome_dependent(&self) -> bool {
        matches!(
            self,
            SelectionRule::DropTheBest
                | SelectionRule::Threshold { .. }
                | SelectionRule::OptimalPower { .. }
                | SelectionRule::MonotoneOptimalPower { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mask: Vec<bool>,
    pub selected: HistoricalPool,
    pub rule: SelectionRule,
    /// Position of the dropped trial (random rule only).
    pub rng_draw: Option<u64>,
    /// Subsets whose pooled prior had to be clamped during optimisation.
    pub degenerate_priors: Vec<u32>,
}

fn from_mask(pool: &HistoricalPool, mask: Vec<bool>, rule: SelectionRule) -> SelectionResult {
    SelectionResult {
        selected: pool.filter(&mask),
        mask,
        rule,
        rng_draw: None,
        degenerate_priors: Vec::new(),
    }
}

fn mask_of(bits: u32, k: usize) -> Vec<bool> {
    (0..k).map(|i| bits >> i & 1 == 1).collect()
}

/// Applies `rule` to `pool`. `rng` is consumed by the random rule only.
pub fn select<R: Rng + ?Sized>(
    pool: &HistoricalPool,
    rule: &SelectionRule,
    rng: &mut R,
) -> Result<SelectionResult> {
    rule.validate()?;
    let k = pool.len();
    if k == 0 && *rule != SelectionRule::Separate {
        return Err(Error::RuleInapplicable {
            rule: rule.name().into(),
            reason: "historical pool is empty".into(),
        });
    }
    let need_two = |rule: &SelectionRule| -> Result<()> {
        if k < 2 {
            Err(Error::RuleInapplicable {
                rule: rule.name().into(),
                reason: format!("needs at least 2 historical trials, got {k}"),
            })
        } else {
            Ok(())
        }
    };
    Ok(match *rule {
        SelectionRule::Full => from_mask(pool, vec![true; k], *rule),
        SelectionRule::Separate => from_mask(pool, vec![false; k], *rule),
        SelectionRule::Random => {
            need_two(rule)?;
            let drop = rng.random_range(0..k);
            let mut r = from_mask(pool, (0..k).map(|i| i != drop).collect(), *rule);
            r.rng_draw = Some(drop as u64);
            r
        }
        SelectionRule::DropTheBest => {
            need_two(rule)?;
            let t = pool.trials();
            let mut best = 0;
            for i in 1..k {
                // rate_i >= rate_best, exact in integers; ties go to the later trial
                let lhs = t[i].responders as u128 * t[best].size as u128;
                let rhs = t[best].responders as u128 * t[i].size as u128;
                if lhs >= rhs {
                    best = i;
                }
            }
            from_mask(pool, (0..k).map(|i| i != best).collect(), *rule)
        }
        SelectionRule::Threshold { threshold } => {
            let mask = pool
                .trials()
                .iter()
                .map(|t| t.responders as f64 <= threshold * t.size as f64 + 1e-9)
                .collect();
            from_mask(pool, mask, *rule)
        }
        SelectionRule::OptimalPower { planning } => optimal_power_select(pool, &planning, false)?,
        SelectionRule::MonotoneOptimalPower { planning } => {
            optimal_power_select(pool, &planning, true)?
        }
    })
}

/// Control prior of the optimiser for pooled counts `(x, n)`: Beta(x, n - x) with both shapes
/// clamped at 0.5, or Beta(1, 1) when nothing is pooled. The flag reports clamping.
pub fn pooled_prior(x: u64, n: u64) -> (BetaMixture, bool) {
    if n == 0 {
        return (BetaMixture::uniform(), false);
    }
    let (a, b) = (x as f64, (n - x) as f64);
    let degenerate = a < 0.5 || b < 0.5;
    let c = BetaParams {
        a: a.max(0.5),
        b: b.max(0.5),
    };
    (BetaMixture::single(c), degenerate)
}

fn cp_pooled(x: u64, n: u64, plan: &PlanningAssumptions) -> Result<f64> {
    let (prior, _) = pooled_prior(x, n);
    let b = boundary(&prior, plan.n_t, plan.n_c, plan.gamma)?;
    Ok(conditional_power(&b, plan.pi_t_star, plan.pi_c_star))
}

/// Conditional power at the planning values of the design whose control prior is the pooled
/// Beta prior of `subset`.
pub fn conditional_power_pooled(
    subset: &HistoricalPool,
    plan: &PlanningAssumptions,
) -> Result<f64> {
    plan.validate()?;
    let (x, n) = subset.pooled();
    cp_pooled(x, n, plan)
}

const CP_TIE: f64 = 1e-12;

/// Memo of pooled conditional power by pooled counts, valid for one set of planning values.
#[derive(Debug)]
pub struct CpCache {
    plan: PlanningAssumptions,
    values: RwLock<HashMap<(u64, u64), f64>>,
}

impl CpCache {
    pub fn new(plan: PlanningAssumptions) -> Result<Self> {
        plan.validate()?;
        Ok(CpCache {
            plan,
            values: RwLock::new(HashMap::new()),
        })
    }

    pub fn plan(&self) -> &PlanningAssumptions {
        &self.plan
    }

    pub fn len(&self) -> usize {
        self.values.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, x: u64, n: u64) -> Result<f64> {
        if let Some(v) = self.values.read().expect("cache lock").get(&(x, n)) {
            return Ok(*v);
        }
        let v = cp_pooled(x, n, &self.plan)?;
        self.values.write().expect("cache lock").insert((x, n), v);
        Ok(v)
    }
}

/// Subset maximising pooled conditional power over all `2^k` subsets. Near-ties prefer more
/// trials, then the smaller bitmask. With `monotone`, every trial older than the most recent
/// excluded one is dropped from the optimum as well.
pub fn optimal_power_select(
    pool: &HistoricalPool,
    plan: &PlanningAssumptions,
    monotone: bool,
) -> Result<SelectionResult> {
    optimal_power_select_cached(pool, &CpCache::new(*plan)?, monotone)
}

/// [`optimal_power_select`] with conditional powers shared through `cache`.
pub fn optimal_power_select_cached(
    pool: &HistoricalPool,
    cache: &CpCache,
    monotone: bool,
) -> Result<SelectionResult> {
    let plan = cache.plan();
    let k = pool.len();
    if k > MAX_ENUMERATED_TRIALS {
        return Err(domain(format!(
            "subset enumeration limited to {MAX_ENUMERATED_TRIALS} trials, got {k}"
        )));
    }
    let candidates: Vec<u32> = (0..1u32 << k).collect();
    let pooled: Vec<(u64, u64)> = candidates
        .iter()
        .map(|&s| pool.subset(s).pooled())
        .collect();
    let mut unique = pooled.clone();
    unique.sort_unstable();
    unique.dedup();
    let values = unique
        .par_iter()
        .map(|&(x, n)| Ok(((x, n), cache.get(x, n)?)))
        .collect::<Result<HashMap<_, _>>>()?;

    let mut best = candidates[0];
    let mut best_cp = values[&pooled[0]];
    for (&s, key) in candidates.iter().zip(&pooled).skip(1) {
        let cp = values[key];
        if cp > best_cp + CP_TIE
            || ((cp - best_cp).abs() <= CP_TIE && s.count_ones() > best.count_ones())
        {
            best = s;
            best_cp = cp;
        }
    }
    let degenerate_priors = candidates
        .iter()
        .zip(&pooled)
        .filter(|(_, &(x, n))| pooled_prior(x, n).1)
        .map(|(&s, _)| s)
        .collect();
    let rule = if monotone {
        if let Some(j) = (0..k).rev().find(|&i| best >> i & 1 == 0) {
            best &= !((1u32 << (j + 1)) - 1);
        }
        SelectionRule::MonotoneOptimalPower { planning: *plan }
    } else {
        SelectionRule::OptimalPower { planning: *plan }
    };
    let mut r = from_mask(pool, mask_of(best, k), rule);
    r.degenerate_priors = degenerate_priors;
    Ok(r)
}
