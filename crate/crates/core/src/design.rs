//! Exact design-stage operating characteristics for a Bayesian two-arm binary design with a
//! Beta(1, 1) treatment prior and a Beta-mixture control prior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::control_prior;
use crate::error::{domain, Result};
use crate::exact::{binomial_pmf_vec, binomial_upper_tails, ln_beta, ln_choose, BetaParams};
use crate::map_prior::{HierarchicalHyperPrior, MapFitSettings};
use crate::mixture::{prob_superior, BetaMixture};
use crate::pool::HistoricalPool;

/// `d1[y_c]` is the largest treatment count that fails the success rule given `y_c` control
/// responders; `-1` means every treatment count succeeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionBoundary {
    pub n_t: u64,
    pub n_c: u64,
    pub d1: Vec<i64>,
}

impl DecisionBoundary {
    pub fn succeeds(&self, y_t: u64, y_c: u64) -> bool {
        y_t as i64 > self.d1[y_c as usize]
    }
}

fn check_design(n_t: u64, n_c: u64, gamma: f64) -> Result<()> {
    if n_t == 0 || n_c == 0 {
        return Err(domain(format!(
            "arm sizes must be positive, got ({n_t}, {n_c})"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(domain(format!(
            "success threshold must lie in (0,1), got {gamma}"
        )));
    }
    Ok(())
}

/// `Pr(π_t > π_c | y_t, y_c)` under a Beta(1, 1) treatment prior and the control prior `prior_c`.
pub fn posterior_superiority(
    prior_c: &BetaMixture,
    y_t: u64,
    n_t: u64,
    y_c: u64,
    n_c: u64,
) -> Result<f64> {
    let post_c = prior_c.posterior_update(y_c, n_c)?;
    posterior_superiority_given(&post_c, y_t, n_t)
}

fn posterior_superiority_given(post_c: &BetaMixture, y_t: u64, n_t: u64) -> Result<f64> {
    let x = BetaParams::new(1.0 + y_t as f64, 1.0 + (n_t - y_t) as f64)?;
    prob_superior(&x, post_c)
}

/// Decision boundary by a two-pointer sweep.
///
/// The superiority probability increases in `y_t` and decreases in `y_c`, so `d1` is
/// nondecreasing in `y_c` and the sweep needs `O(n_t + n_c)` evaluations.
pub fn boundary(prior_c: &BetaMixture, n_t: u64, n_c: u64, gamma: f64) -> Result<DecisionBoundary> {
    check_design(n_t, n_c, gamma)?;
    let mut d1 = Vec::with_capacity(n_c as usize + 1);
    let mut d: i64 = -1;
    for y_c in 0..=n_c {
        let post_c = prior_c.posterior_update(y_c, n_c)?;
        while d < n_t as i64 && posterior_superiority_given(&post_c, (d + 1) as u64, n_t)? <= gamma
        {
            d += 1;
        }
        d1.push(d);
    }
    Ok(DecisionBoundary { n_t, n_c, d1 })
}

/// Boundary by evaluating every table; reference for [`boundary`].
pub fn boundary_exhaustive(
    prior_c: &BetaMixture,
    n_t: u64,
    n_c: u64,
    gamma: f64,
) -> Result<DecisionBoundary> {
    check_design(n_t, n_c, gamma)?;
    let mut d1 = Vec::with_capacity(n_c as usize + 1);
    for y_c in 0..=n_c {
        let post_c = prior_c.posterior_update(y_c, n_c)?;
        let mut d = -1;
        for y_t in 0..=n_t {
            if posterior_superiority_given(&post_c, y_t, n_t)? <= gamma {
                d = y_t as i64;
            }
        }
        d1.push(d);
    }
    Ok(DecisionBoundary { n_t, n_c, d1 })
}

/// Probability of meeting the success rule when the true rates are `pi_t` and `pi_c`.
pub fn conditional_power(b: &DecisionBoundary, pi_t: f64, pi_c: f64) -> f64 {
    let pmf_c = binomial_pmf_vec(b.n_c, pi_c);
    let tail_t = binomial_upper_tails(b.n_t, pi_t);
    let cp: f64 = pmf_c
        .iter()
        .zip(&b.d1)
        .map(|(p, &d)| p * tail_t[(d + 1) as usize])
        .sum();
    cp.clamp(0.0, 1.0)
}

/// Conditional type-I error and power over a grid of control rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcCurve {
    pub grid: Vec<f64>,
    pub t1e: Vec<f64>,
    /// Evaluated at `π_t = π_c + rd_alt`.
    pub power: Vec<f64>,
}

fn check_grid(grid: &[f64], rd_alt: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(domain("rate grid is empty"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(domain("rate grid must be strictly increasing"));
    }
    for &p in grid {
        if !(p > 0.0 && p < 1.0 && p + rd_alt > 0.0 && p + rd_alt < 1.0) {
            return Err(domain(format!(
                "grid point {p} with difference {rd_alt} leaves (0,1)"
            )));
        }
    }
    Ok(())
}

/// Evenly spaced grid `lo, lo + step, ..., hi`, rounded to 1e-12.
pub fn rate_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && lo <= hi) {
        return Err(domain(format!("invalid grid [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Curves for a fixed boundary.
pub fn oc_for_boundary(b: &DecisionBoundary, grid: &[f64], rd_alt: f64) -> Result<OcCurve> {
    check_grid(grid, rd_alt)?;
    let (t1e, power) = grid
        .par_iter()
        .map(|&p| {
            (
                conditional_power(b, p, p),
                conditional_power(b, p + rd_alt, p),
            )
        })
        .collect::<Vec<_>>()
        .into_iter()
        .unzip();
    Ok(OcCurve {
        grid: grid.to_vec(),
        t1e,
        power,
    })
}

pub fn conditional_oc(
    prior_c: &BetaMixture,
    n_t: u64,
    n_c: u64,
    gamma: f64,
    grid: &[f64],
    rd_alt: f64,
) -> Result<OcCurve> {
    check_grid(grid, rd_alt)?;
    let b = boundary(prior_c, n_t, n_c, gamma)?;
    oc_for_boundary(&b, grid, rd_alt)
}

/// Prior-predictive (Beta-binomial mixture) probabilities of `0..=n` responders.
pub fn prior_predictive_pmf(prior: &BetaMixture, n: u64) -> Vec<f64> {
    let mut pmf = vec![0.0; n as usize + 1];
    for (w, c) in prior.iter() {
        if w <= 0.0 {
            continue;
        }
        let lb = ln_beta(c.a, c.b);
        for (y, slot) in pmf.iter_mut().enumerate() {
            let yf = y as f64;
            let l = ln_choose(n, y as u64) + ln_beta(c.a + yf, c.b + (n as f64 - yf)) - lb;
            *slot += w * l.exp();
        }
    }
    pmf
}

/// Probability of success for a boundary: conditional power averaged over independent design
/// priors, summed exactly through the prior-predictive laws of both arms.
pub fn pos_for_boundary(
    b: &DecisionBoundary,
    design_t: &BetaMixture,
    design_c: &BetaMixture,
) -> f64 {
    let m_t = prior_predictive_pmf(design_t, b.n_t);
    let mut tail_t = vec![0.0; m_t.len() + 1];
    for d in (0..m_t.len()).rev() {
        tail_t[d] = tail_t[d + 1] + m_t[d];
    }
    let m_c = prior_predictive_pmf(design_c, b.n_c);
    let pos: f64 = m_c
        .iter()
        .zip(&b.d1)
        .map(|(p, &d)| p * tail_t[(d + 1) as usize])
        .sum();
    pos.clamp(0.0, 1.0)
}

/// Probability of success with the analysis control prior also serving as the control design
/// prior.
pub fn probability_of_success(
    prior_c: &BetaMixture,
    design_t: &BetaMixture,
    n_t: u64,
    n_c: u64,
    gamma: f64,
) -> Result<f64> {
    probability_of_success_with(prior_c, design_t, prior_c, n_t, n_c, gamma)
}

/// Probability of success with separate analysis and design priors for the control arm.
pub fn probability_of_success_with(
    prior_c: &BetaMixture,
    design_t: &BetaMixture,
    design_c: &BetaMixture,
    n_t: u64,
    n_c: u64,
    gamma: f64,
) -> Result<f64> {
    let b = boundary(prior_c, n_t, n_c, gamma)?;
    Ok(pos_for_boundary(&b, design_t, design_c))
}

/// A robust MAP design: prospective sizes, success threshold and the prior construction
/// applied to whichever historical trials are selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesDesign {
    pub n_t: u64,
    pub n_c: u64,
    pub gamma: f64,
    pub w_r: f64,
    #[serde(default)]
    pub hyper: HierarchicalHyperPrior,
}

impl BayesDesign {
    pub fn validate(&self) -> Result<()> {
        check_design(self.n_t, self.n_c, self.gamma)?;
        if !(self.w_r > 0.0 && self.w_r < 1.0) {
            return Err(domain(format!(
                "robustness weight must lie in (0,1), got {}",
                self.w_r
            )));
        }
        self.hyper.validate()
    }

    /// Analysis prior for the control arm given the selected trials.
    pub fn control_prior(
        &self,
        selected: &HistoricalPool,
        settings: &MapFitSettings,
    ) -> Result<BetaMixture> {
        control_prior(selected, self.w_r, &self.hyper, settings)
    }

    pub fn boundary(&self, prior_c: &BetaMixture) -> Result<DecisionBoundary> {
        boundary(prior_c, self.n_t, self.n_c, self.gamma)
    }
}

/// Pointwise worst case over all subsets of the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub grid: Vec<f64>,
    /// Subset bitmask (bit `i` = trial at position `i`) attaining the maximum at each grid point.
    pub masks: Vec<u32>,
    pub t1e: Vec<f64>,
}

pub const MAX_ENUMERATED_TRIALS: usize = 20;

/// Conditional type-I error of every subset's design, maximised pointwise over subsets.
/// Ties keep the smallest bitmask. Subsets with identical trial counts share one prior fit.
pub fn worst_case_selection(
    pool: &HistoricalPool,
    design: &BayesDesign,
    settings: &MapFitSettings,
    grid: &[f64],
) -> Result<WorstCase> {
    design.validate()?;
    check_grid(grid, 0.0)?;
    let k = pool.len();
    if k > MAX_ENUMERATED_TRIALS {
        return Err(domain(format!(
            "subset enumeration limited to {MAX_ENUMERATED_TRIALS} trials, got {k}"
        )));
    }
    let subsets: Vec<u32> = (0..1u32 << k).collect();
    // one boundary per distinct content key
    let mut keys: Vec<Vec<(u64, u64)>> = subsets
        .iter()
        .map(|&s| pool.subset(s).content_key())
        .collect();
    let mut unique = keys.clone();
    unique.sort();
    unique.dedup();
    let curves = unique
        .par_iter()
        .map(|key| {
            let sub = HistoricalPool::from_counts(key)?;
            let prior = design.control_prior(&sub, settings)?;
            let b = design.boundary(&prior)?;
            Ok(grid
                .iter()
                .map(|&p| conditional_power(&b, p, p))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let curve_of: Vec<usize> = keys
        .drain(..)
        .map(|key| unique.binary_search(&key).expect("key present"))
        .collect();
    let mut masks = vec![0u32; grid.len()];
    let mut t1e = vec![f64::NEG_INFINITY; grid.len()];
    for (&s, &c) in subsets.iter().zip(&curve_of) {
        for (g, &v) in curves[c].iter().enumerate() {
            if v > t1e[g] {
                t1e[g] = v;
                masks[g] = s;
            }
        }
    }
    Ok(WorstCase {
        grid: grid.to_vec(),
        masks,
        t1e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mix() -> BetaMixture {
        BetaMixture::new(
            vec![0.2, 0.5, 0.3],
            vec![
                BetaParams::new(1.0, 1.0).unwrap(),
                BetaParams::new(12.0, 40.0).unwrap(),
                BetaParams::new(3.5, 9.0).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn tiny_trial_never_succeeds() {
        let b = boundary(&BetaMixture::uniform(), 1, 1, 0.975).unwrap();
        assert_eq!(b.d1, vec![1, 1]);
    }

    #[test]
    fn sweep_matches_exhaustive() {
        for (n_t, n_c) in [(24, 6), (30, 30), (13, 41)] {
            let a = boundary(&mix(), n_t, n_c, 0.975).unwrap();
            let b = boundary_exhaustive(&mix(), n_t, n_c, 0.975).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conditional_power_matches_direct_sum() {
        let b = boundary(&mix(), 20, 10, 0.9).unwrap();
        let (pt, pc) = (0.45, 0.25);
        let pmf_t = binomial_pmf_vec(20, pt);
        let pmf_c = binomial_pmf_vec(10, pc);
        let mut direct = 0.0;
        for yc in 0..=10u64 {
            for yt in 0..=20u64 {
                if posterior_superiority(&mix(), yt, 20, yc, 10).unwrap() > 0.9 {
                    direct += pmf_t[yt as usize] * pmf_c[yc as usize];
                }
            }
        }
        assert!((conditional_power(&b, pt, pc) - direct).abs() < 1e-13);
    }

    #[test]
    fn zero_difference_power_is_t1e() {
        let grid = rate_grid(0.05, 0.6, 0.05).unwrap();
        let oc = conditional_oc(&mix(), 24, 6, 0.975, &grid, 0.0).unwrap();
        assert_eq!(oc.t1e, oc.power);
        assert_eq!(grid.len(), 12);
    }

    #[test]
    fn grid_validation() {
        assert!(conditional_oc(&mix(), 5, 5, 0.9, &[0.3, 0.2], 0.0).is_err());
        assert!(conditional_oc(&mix(), 5, 5, 0.9, &[0.3, 0.8], 0.25).is_err());
    }

    #[test]
    fn predictive_pmf_sums_to_one() {
        let s: f64 = prior_predictive_pmf(&mix(), 57).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        // uniform prior gives the discrete uniform law
        let u = prior_predictive_pmf(&BetaMixture::uniform(), 9);
        assert!(u.iter().all(|p| (p - 0.1).abs() < 1e-13));
    }
}
