//! Analyses of one prospective trial given the selected historical controls: frequentist
//! separate and test-then-pool, Bayesian separate and robust MAP.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::exact::{
    fisher_exact_one_sided, fisher_exact_two_sided, prop_diff_ci_cc, BetaParams, Counts2x2,
};
use crate::map_prior::{fit_map_prior_with, HierarchicalHyperPrior, MapFitSettings};
use crate::mixture::{ess_elir, prob_superior, robust_single, BetaMixture};
use crate::pool::HistoricalPool;

/// Observed prospective counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProspectiveData {
    pub y_t: u64,
    pub n_t: u64,
    pub y_c: u64,
    pub n_c: u64,
}

impl ProspectiveData {
    pub fn new(y_t: u64, n_t: u64, y_c: u64, n_c: u64) -> Result<Self> {
        Counts2x2::new(y_t, n_t, y_c, n_c)?;
        Ok(ProspectiveData { y_t, n_t, y_c, n_c })
    }

    fn table(&self) -> Counts2x2 {
        Counts2x2 {
            y_t: self.y_t,
            n_t: self.n_t,
            y_c: self.y_c,
            n_c: self.n_c,
        }
    }
}

/// Analysis method and its levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisConfig {
    /// Test-then-pool: two-sided Fisher pre-test at `alpha_pre`, one-sided Fisher at `alpha`.
    TtPool {
        alpha_pre: f64,
        alpha: f64,
    },
    FreqSeparate {
        alpha: f64,
    },
    BayesSeparate {
        gamma: f64,
    },
    RobustMap {
        w_r: f64,
        gamma: f64,
        #[serde(default)]
        hyper: HierarchicalHyperPrior,
    },
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        let level = |v: f64, what: &str| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(domain(format!("{what} must lie in (0,1), got {v}")))
            }
        };
        let threshold = |g: f64| {
            if g > 0.5 && g < 1.0 {
                Ok(())
            } else {
                Err(domain(format!(
                    "success threshold must lie in (0.5,1), got {g}"
                )))
            }
        };
        match *self {
            AnalysisConfig::TtPool { alpha_pre, alpha } => {
                level(alpha_pre, "pre-test level")?;
                level(alpha, "test level")
            }
            AnalysisConfig::FreqSeparate { alpha } => level(alpha, "test level"),
            AnalysisConfig::BayesSeparate { gamma } => threshold(gamma),
            AnalysisConfig::RobustMap { w_r, gamma, hyper } => {
                level(w_r, "robustness weight")?;
                threshold(gamma)?;
                hyper.validate()
            }
        }
    }

    /// Short method name used in outputs.
    pub fn name(&self) -> &'static str {
        match self {
            AnalysisConfig::TtPool { .. } => "ttp",
            AnalysisConfig::FreqSeparate { .. } => "freq_separate",
            AnalysisConfig::BayesSeparate { .. } => "bayes_separate",
            AnalysisConfig::RobustMap { .. } => "robust_map",
        }
    }

    pub fn is_bayesian(&self) -> bool {
        matches!(
            self,
            AnalysisConfig::BayesSeparate { .. } | AnalysisConfig::RobustMap { .. }
        )
    }
}

/// Outcome of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub success: bool,
    pub rd_estimate: f64,
    pub interval: Option<(f64, f64)>,
    /// Posterior probability of superiority (Bayesian only).
    pub posterior_prob: Option<f64>,
    /// One-sided Fisher p-value of the treatment comparison (frequentist only).
    pub p_value: Option<f64>,
    /// Whether historical controls were pooled (test-then-pool only).
    pub pooled: Option<bool>,
    /// Prior effective sample size of the control prior (Bayesian only).
    pub ess: Option<f64>,
    /// Difference of prospective sample means, kept for diagnostics.
    pub rd_prospective_only: f64,
}

fn sample_rd(data: &ProspectiveData) -> f64 {
    data.y_t as f64 / data.n_t as f64 - data.y_c as f64 / data.n_c as f64
}

const CI_LEVEL: f64 = 0.95;

/// One-sided Fisher test of the prospective arms alone.
pub fn analyze_freq_separate(data: &ProspectiveData, alpha: f64) -> Result<AnalysisResult> {
    let tbl = data.table();
    let p = fisher_exact_one_sided(&tbl);
    let ci = prop_diff_ci_cc(&tbl, CI_LEVEL)?;
    Ok(AnalysisResult {
        success: p <= alpha,
        rd_estimate: ci.estimate,
        interval: Some((ci.lower, ci.upper)),
        posterior_prob: None,
        p_value: Some(p),
        pooled: None,
        ess: None,
        rd_prospective_only: sample_rd(data),
    })
}

/// Test-then-pool. An empty selection skips the pre-test and analyses separately.
pub fn analyze_ttp(
    selected: &HistoricalPool,
    data: &ProspectiveData,
    alpha_pre: f64,
    alpha: f64,
) -> Result<AnalysisResult> {
    if selected.is_empty() {
        return analyze_freq_separate(data, alpha);
    }
    let (x_h, n_h) = selected.pooled();
    let pre = Counts2x2::new(x_h, n_h, data.y_c, data.n_c)?;
    let pooled = fisher_exact_two_sided(&pre) >= alpha_pre;
    let tbl = if pooled {
        Counts2x2::new(data.y_t, data.n_t, data.y_c + x_h, data.n_c + n_h)?
    } else {
        data.table()
    };
    let p = fisher_exact_one_sided(&tbl);
    let ci = prop_diff_ci_cc(&tbl, CI_LEVEL)?;
    Ok(AnalysisResult {
        success: p <= alpha,
        rd_estimate: ci.estimate,
        interval: Some((ci.lower, ci.upper)),
        posterior_prob: None,
        p_value: Some(p),
        pooled: Some(pooled),
        ess: None,
        rd_prospective_only: sample_rd(data),
    })
}

/// Control prior for the robust MAP analysis of a selection: robustified MAP prior for two or
/// more trials, robust mixture prior for one, Beta(1, 1) for none.
pub fn control_prior(
    selected: &HistoricalPool,
    w_r: f64,
    hyper: &HierarchicalHyperPrior,
    settings: &MapFitSettings,
) -> Result<BetaMixture> {
    match selected.len() {
        0 => Ok(BetaMixture::uniform()),
        1 => robust_single(&selected.trials()[0], w_r),
        _ => fit_map_prior_with(selected, hyper, None, settings)?
            .mixture
            .robustify(w_r),
    }
}

/// Bayesian analysis with a given control prior and a Beta(1, 1) treatment prior.
///
/// `with_interval` adds the equal-tailed 95% credible interval of the difference; `with_ess`
/// adds the prior effective sample size.
pub fn analyze_bayes_with_prior(
    prior_c: &BetaMixture,
    data: &ProspectiveData,
    gamma: f64,
    with_interval: bool,
    with_ess: bool,
) -> Result<AnalysisResult> {
    let post_t = BetaParams::new(1.0 + data.y_t as f64, 1.0 + (data.n_t - data.y_t) as f64)?;
    let post_c = prior_c.posterior_update(data.y_c, data.n_c)?;
    let prob = prob_superior(&post_t, &post_c)?;
    let interval = if with_interval {
        Some(difference_interval(&post_t, &post_c, CI_LEVEL))
    } else {
        None
    };
    let ess = if with_ess {
        Some(ess_elir(prior_c)?)
    } else {
        None
    };
    Ok(AnalysisResult {
        success: prob > gamma,
        rd_estimate: post_t.mean() - post_c.mean(),
        interval,
        posterior_prob: Some(prob),
        p_value: None,
        pooled: None,
        ess,
        rd_prospective_only: sample_rd(data),
    })
}

/// Bayesian analysis per `cfg` (robust MAP or separate), with the fine MAP fit.
pub fn analyze_bayes(
    selected: &HistoricalPool,
    data: &ProspectiveData,
    cfg: &AnalysisConfig,
) -> Result<AnalysisResult> {
    cfg.validate()?;
    match *cfg {
        AnalysisConfig::BayesSeparate { gamma } => {
            analyze_bayes_with_prior(&BetaMixture::uniform(), data, gamma, true, false)
        }
        AnalysisConfig::RobustMap { w_r, gamma, hyper } => {
            let prior = control_prior(selected, w_r, &hyper, &MapFitSettings::fine())?;
            analyze_bayes_with_prior(&prior, data, gamma, true, !selected.is_empty())
        }
        _ => Err(domain(format!("`{}` is not a Bayesian method", cfg.name()))),
    }
}

/// Runs any configured analysis.
pub fn analyze(
    selected: &HistoricalPool,
    data: &ProspectiveData,
    cfg: &AnalysisConfig,
) -> Result<AnalysisResult> {
    cfg.validate()?;
    match *cfg {
        AnalysisConfig::TtPool { alpha_pre, alpha } => {
            analyze_ttp(selected, data, alpha_pre, alpha)
        }
        AnalysisConfig::FreqSeparate { alpha } => analyze_freq_separate(data, alpha),
        _ => analyze_bayes(selected, data, cfg),
    }
}

const CONV_CELLS: usize = 2048;

fn support(mean: f64, var: f64) -> (f64, f64) {
    let sd = var.sqrt();
    ((mean - 12.0 * sd).max(0.0), (mean + 12.0 * sd).min(1.0))
}

/// Equal-tailed interval of `X - Y` by discretising both laws on a common grid of cell width
/// `h` (2048 cells across the joint support), convolving the cell masses and inverting the
/// cumulative mass by linear interpolation.
pub fn difference_interval(x: &BetaParams, y: &BetaMixture, level: f64) -> (f64, f64) {
    let (xl, xh) = support(x.mean(), x.variance());
    let (yl, yh) = support(y.mean(), y.variance());
    let h = (xh.max(yh) - xl.min(yl)) / CONV_CELLS as f64;
    let masses = |lo: f64, hi: f64, cdf: &dyn Fn(f64) -> f64| {
        let cells = (((hi - lo) / h).ceil() as usize).max(1);
        let mut prev = cdf(lo);
        let mut m = Vec::with_capacity(cells);
        for i in 1..=cells {
            let c = cdf((lo + h * i as f64).min(1.0));
            m.push((c - prev).max(0.0));
            prev = c;
        }
        m
    };
    let mx = masses(xl, xh, &|t| x.cdf(t));
    let my = masses(yl, yh, &|t| y.cdf(t));
    // cell i of X minus cell j of Y sits at xl - yl + (i - j) h
    let off = my.len() - 1;
    let mut md = vec![0.0; mx.len() + my.len() - 1];
    for (i, a) in mx.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        for (j, b) in my.iter().enumerate() {
            md[i + off - j] += a * b;
        }
    }
    let total: f64 = md.iter().sum();
    let base = xl - yl - off as f64 * h;
    let quantile = |p: f64| {
        let target = p * total;
        let mut acc = 0.0;
        for (k, m) in md.iter().enumerate() {
            if acc + m >= target && *m > 0.0 {
                // mass of index k spread over [base + (k - 1/2) h, base + (k + 1/2) h]
                let frac = (target - acc) / m;
                return base + (k as f64 - 0.5 + frac) * h;
            }
            acc += m;
        }
        base + (md.len() as f64 - 0.5) * h
    };
    let tail = 0.5 * (1.0 - level);
    (
        quantile(tail).clamp(-1.0, 1.0),
        quantile(1.0 - tail).clamp(-1.0, 1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case_data() -> ProspectiveData {
        ProspectiveData::new(14, 24, 1, 6).unwrap()
    }

    #[test]
    fn ttp_empty_selection_is_separate() {
        let d = case_data();
        let a = analyze_ttp(&HistoricalPool::empty(), &d, 0.1, 0.025).unwrap();
        let b = analyze_freq_separate(&d, 0.025).unwrap();
        assert_eq!(a, b);
        assert!((a.rd_estimate - 0.417).abs() < 0.001);
        assert!((a.p_value.unwrap() - 0.084).abs() < 0.0005);
        assert!(!a.success);
    }

    #[test]
    fn ttp_conflicting_history_is_not_pooled() {
        let pool = HistoricalPool::from_counts(&[(90, 100)]).unwrap();
        let r = analyze_ttp(&pool, &case_data(), 0.1, 0.025).unwrap();
        assert_eq!(r.pooled, Some(false));
        let sep = analyze_freq_separate(&case_data(), 0.025).unwrap();
        assert_eq!(r.rd_estimate, sep.rd_estimate);
        assert_eq!(r.p_value, sep.p_value);
    }

    #[test]
    fn bayes_separate_case_study() {
        let r = analyze_bayes(
            &HistoricalPool::empty(),
            &case_data(),
            &AnalysisConfig::BayesSeparate { gamma: 0.975 },
        )
        .unwrap();
        assert!((r.rd_estimate - (15.0 / 26.0 - 2.0 / 8.0)).abs() < 1e-12);
        assert!((r.posterior_prob.unwrap() - 0.959).abs() < 0.001);
        assert!(!r.success);
        let (lo, hi) = r.interval.unwrap();
        assert!(
            (lo - -0.047).abs() < 0.01 && (hi - 0.624).abs() < 0.01,
            "{lo} {hi}"
        );
    }

    #[test]
    fn difference_interval_matches_normal_limit() {
        // large counts: X - Y close to normal
        let x = BetaParams::new(401.0, 601.0).unwrap();
        let y = BetaMixture::single(BetaParams::new(301.0, 701.0).unwrap());
        let (lo, hi) = difference_interval(&x, &y, 0.95);
        let m = x.mean() - 0.3 * 1.0 - (y.mean() - 0.3);
        let sd = (x.variance() + y.variance()).sqrt();
        assert!((lo - (m - 1.959964 * sd)).abs() < 1e-3, "{lo}");
        assert!((hi - (m + 1.959964 * sd)).abs() < 1e-3, "{hi}");
    }

    #[test]
    fn near_vague_robust_prior_approaches_separate() {
        let pool = HistoricalPool::from_counts(&[(5, 25)]).unwrap();
        let prior = control_prior(
            &pool,
            0.999,
            &HierarchicalHyperPrior::default(),
            &MapFitSettings::simulation(),
        )
        .unwrap();
        let r = analyze_bayes_with_prior(&prior, &case_data(), 0.975, false, false).unwrap();
        let s =
            analyze_bayes_with_prior(&BetaMixture::uniform(), &case_data(), 0.975, false, false)
                .unwrap();
        assert!((r.posterior_prob.unwrap() - s.posterior_prob.unwrap()).abs() <= 1e-3);
    }
}
