//! Finite Beta mixtures: robustification, conjugate updating and ELIR effective sample size.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::exact::{ln_beta, BetaParams};
use crate::pool::HistoricalTrial;
use crate::quadrature;

/// Weighted list of Beta components. Weights are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    weights: Vec<f64>,
    components: Vec<BetaParams>,
}

impl BetaMixture {
    /// Builds a mixture, renormalizing weights that sum to one within 1e-9.
    pub fn new(weights: Vec<f64>, components: Vec<BetaParams>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(domain(
                "mixture needs equally many (>= 1) weights and components",
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(domain(format!(
                "mixture weights must be non-negative, got {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(domain(format!("mixture weights sum to {total}, not 1")));
        }
        for c in &components {
            BetaParams::new(c.a, c.b)?;
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(BetaMixture {
            weights,
            components,
        })
    }

    pub fn single(component: BetaParams) -> Self {
        BetaMixture {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    /// The vague Beta(1, 1) prior.
    pub fn uniform() -> Self {
        Self::single(BetaParams { a: 1.0, b: 1.0 })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[BetaParams] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &BetaParams)> {
        self.weights.iter().copied().zip(self.components.iter())
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(w, c)| w * c.mean()).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let second: f64 = self
            .iter()
            .map(|(w, c)| w * (c.variance() + c.mean() * c.mean()))
            .sum();
        second - m * m
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.iter().map(|(w, c)| w * c.pdf(x)).sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.iter().map(|(w, c)| w * c.cdf(x)).sum()
    }

    /// Density and its first two derivatives at `x` in (0, 1).
    fn pdf_derivatives(&self, x: f64) -> (f64, f64, f64) {
        let (mut p, mut d1, mut d2) = (0.0, 0.0, 0.0);
        let lx = x.ln();
        let l1x = (-x).ln_1p();
        for (w, c) in self.iter() {
            if w == 0.0 {
                continue;
            }
            let f = w * ((c.a - 1.0) * lx + (c.b - 1.0) * l1x - ln_beta(c.a, c.b)).exp();
            let am = c.a - 1.0;
            let bm = c.b - 1.0;
            let g = am / x - bm / (1.0 - x);
            p += f;
            d1 += f * g;
            d2 += f * (g * g - am / (x * x) - bm / ((1.0 - x) * (1.0 - x)));
        }
        (p, d1, d2)
    }

    /// Mixes in a vague Beta(1, 1) component with weight `w_r`, scaling the existing weights by
    /// `1 - w_r`. The vague component comes first.
    pub fn robustify(&self, w_r: f64) -> Result<Self> {
        if !(w_r > 0.0 && w_r < 1.0) {
            return Err(domain(format!(
                "robustness weight must lie in (0,1), got {w_r}"
            )));
        }
        let mut weights = Vec::with_capacity(self.len() + 1);
        let mut components = Vec::with_capacity(self.len() + 1);
        weights.push(w_r);
        components.push(BetaParams { a: 1.0, b: 1.0 });
        for (w, c) in self.iter() {
            weights.push((1.0 - w_r) * w);
            components.push(*c);
        }
        Ok(BetaMixture {
            weights,
            components,
        })
    }

    /// Conjugate update with `y` responders out of `n`.
    pub fn posterior_update(&self, y: u64, n: u64) -> Result<Self> {
        Ok(self.update_with_evidence(y, n)?.0)
    }

    /// Conjugate update that also returns the log marginal likelihood of the data
    /// (without the binomial coefficient).
    pub fn update_with_evidence(&self, y: u64, n: u64) -> Result<(Self, f64)> {
        if y > n {
            return Err(domain(format!("responders {y} exceed size {n}")));
        }
        if n == 0 {
            return Ok((self.clone(), 0.0));
        }
        let (yf, ff) = (y as f64, (n - y) as f64);
        let mut logw = Vec::with_capacity(self.len());
        let mut components = Vec::with_capacity(self.len());
        for (w, c) in self.iter() {
            let post = BetaParams {
                a: c.a + yf,
                b: c.b + ff,
            };
            let lw = if w > 0.0 {
                w.ln() + ln_beta(post.a, post.b) - ln_beta(c.a, c.b)
            } else {
                f64::NEG_INFINITY
            };
            logw.push(lw);
            components.push(post);
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logw.iter().map(|l| (l - max).exp()).sum();
        let weights = logw.iter().map(|l| (l - max).exp() / total).collect();
        Ok((
            BetaMixture {
                weights,
                components,
            },
            max + total.ln(),
        ))
    }
}

/// `Pr[X > Y]` for `X ~ Beta(x)` and `Y` distributed as the mixture `y`.
pub fn prob_superior(x: &BetaParams, y: &BetaMixture) -> Result<f64> {
    let mut p = 0.0;
    for (w, c) in y.iter() {
        if w > 0.0 {
            p += w * crate::exact::beta_superiority(x, c)?;
        }
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Robust mixture prior for a single retained historical trial:
/// `w_r Beta(1,1) + (1 - w_r) Beta(1 + x, 1 + n - x)`.
pub fn robust_single(trial: &HistoricalTrial, w_r: f64) -> Result<BetaMixture> {
    let post = BetaParams {
        a: 1.0 + trial.responders as f64,
        b: 1.0 + (trial.size - trial.responders) as f64,
    };
    BetaMixture::single(post).robustify(w_r)
}

const ELIR_EPS: f64 = 1e-8;
const ELIR_TOL: f64 = 1e-6;

/// Effective sample size by the expected local-information ratio,
/// `E_p[ i_p(π) / i_F(π) ]` with `i_p = -(log p)''` and `i_F = 1 / (π(1-π))`,
/// integrated over `(1e-8, 1 - 1e-8)`.
pub fn ess_elir(prior: &BetaMixture) -> Result<f64> {
    // substitute π = 1/(1+e^-s), dπ = π(1-π) ds:
    // p · i_p · π(1-π) dπ = (p'^2/p - p'') · [π(1-π)]^2 ds
    let logit = |t: f64| t.ln() - (-t).ln_1p();
    let integrand = |s: f64| {
        let x = 1.0 / (1.0 + (-s).exp());
        let v = x * (1.0 - x);
        if v <= 0.0 {
            return 0.0;
        }
        let (p, d1, d2) = prior.pdf_derivatives(x);
        if p <= 0.0 || !p.is_finite() {
            return 0.0;
        }
        (d1 * d1 / p - d2) * v * v
    };
    let lo = logit(ELIR_EPS);
    let hi = -lo;
    // panels centred on the prior mean keep the bisection short for peaked priors
    let m = logit(prior.mean().clamp(1e-6, 1.0 - 1e-6));
    let sd = (prior.variance().sqrt() / (prior.mean() * (1.0 - prior.mean()))).max(1e-3);
    let mut cuts = vec![lo];
    for k in [-6.0, -2.0, 0.0, 2.0, 6.0] {
        let c = m + k * sd;
        if c > *cuts.last().unwrap() && c < hi {
            cuts.push(c);
        }
    }
    cuts.push(hi);
    let mut total = 0.0;
    let share = ELIR_TOL / (cuts.len() - 1) as f64;
    for w in cuts.windows(2) {
        total += quadrature::adaptive(w[0], w[1], share, integrand)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta(a: f64, b: f64) -> BetaParams {
        BetaParams::new(a, b).unwrap()
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(BetaMixture::new(vec![0.5, 0.4], vec![beta(1.0, 1.0), beta(2.0, 2.0)]).is_err());
        assert!(BetaMixture::new(vec![], vec![]).is_err());
        assert!(BetaMixture::new(vec![1.0], vec![BetaParams { a: -1.0, b: 1.0 }]).is_err());
    }

    #[test]
    fn robustify_prepends_vague_component() {
        let m = BetaMixture::single(beta(5.0, 20.0)).robustify(0.1).unwrap();
        assert_eq!(m.weights(), &[0.1, 0.9]);
        assert_eq!(m.components()[0], beta(1.0, 1.0));
        assert!(BetaMixture::uniform().robustify(1.0).is_err());
        assert!(BetaMixture::uniform().robustify(0.0).is_err());
    }

    #[test]
    fn robust_single_formula() {
        let t = HistoricalTrial::new(1, 6, 20).unwrap();
        let m = robust_single(&t, 0.1).unwrap();
        assert_eq!(m.weights(), &[0.1, 0.9]);
        assert_eq!(m.components(), &[beta(1.0, 1.0), beta(7.0, 15.0)]);
        let t = HistoricalTrial::new(1, 0, 10).unwrap();
        let m = robust_single(&t, 0.5).unwrap();
        assert_eq!(m.weights(), &[0.5, 0.5]);
        assert_eq!(m.components(), &[beta(1.0, 1.0), beta(1.0, 11.0)]);
        assert_eq!(m.posterior_update(3, 9).unwrap().len(), 2);
    }

    #[test]
    fn update_single_component() {
        let m = BetaMixture::uniform().posterior_update(1, 6).unwrap();
        assert_eq!(m.weights(), &[1.0]);
        assert_eq!(m.components(), &[beta(2.0, 6.0)]);
        let prior = BetaMixture::single(beta(2.0, 3.0));
        assert_eq!(prior.posterior_update(0, 0).unwrap(), prior);
        assert!(prior.posterior_update(5, 4).is_err());
    }

    #[test]
    fn update_two_components_matches_hand_computation() {
        let prior =
            BetaMixture::new(vec![0.5, 0.5], vec![beta(1.0, 1.0), beta(10.0, 30.0)]).unwrap();
        let post = prior.posterior_update(5, 20).unwrap();
        // B(6,16)/B(1,1) vs B(15,45)/B(10,30), computed from factorials
        let fact = |n: u32| (1..=n).map(|k| (k as f64).ln()).sum::<f64>();
        let lb = |a: u32, b: u32| fact(a - 1) + fact(b - 1) - fact(a + b - 1);
        let l0 = lb(6, 16) - lb(1, 1);
        let l1 = lb(15, 45) - lb(10, 30);
        let w0 = 1.0 / (1.0 + (l1 - l0).exp());
        assert!((post.weights()[0] - w0).abs() < 1e-12);
        assert!((post.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conflicting_data_raises_vague_weight() {
        let rob = BetaMixture::single(beta(20.0, 80.0))
            .robustify(0.2)
            .unwrap();
        let post = rob.posterior_update(18, 20).unwrap();
        assert!(post.weights()[0] > 0.2);
        let agree = rob.posterior_update(4, 20).unwrap();
        assert!(agree.weights()[0] < 0.2);
    }

    #[test]
    fn elir_of_single_beta_is_prior_sample_size() {
        let ess = ess_elir(&BetaMixture::single(beta(3.0, 7.0))).unwrap();
        assert!((ess - 10.0).abs() < 1e-4, "{ess}");
        let ess = ess_elir(&BetaMixture::single(beta(41.5, 120.25))).unwrap();
        assert!((ess - 161.75).abs() < 1e-4, "{ess}");
        let twin = BetaMixture::new(vec![0.3, 0.7], vec![beta(4.0, 9.0), beta(4.0, 9.0)]).unwrap();
        assert!((ess_elir(&twin).unwrap() - 13.0).abs() < 1e-4);
    }

    #[test]
    fn elir_positive_for_robust_mixture() {
        let m = BetaMixture::new(vec![0.6, 0.4], vec![beta(12.0, 40.0), beta(3.0, 7.0)])
            .unwrap()
            .robustify(0.1)
            .unwrap();
        let ess = ess_elir(&m).unwrap();
        assert!(ess > 0.0 && ess < 52.0, "{ess}");
    }
}
