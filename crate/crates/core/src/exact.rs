//! Exact small-sample kernels: Beta-function arithmetic, Fisher's exact tests, the
//! continuity-corrected two-proportion interval and `Pr[X > Y]` for two Beta variables.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, numeric, Result};
use crate::quadrature;

/// Responders and sizes of two binomial arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts2x2 {
    pub y_t: u64,
    pub n_t: u64,
    pub y_c: u64,
    pub n_c: u64,
}

impl Counts2x2 {
    pub fn new(y_t: u64, n_t: u64, y_c: u64, n_c: u64) -> Result<Self> {
        if n_t == 0 || n_c == 0 || y_t > n_t || y_c > n_c {
            return Err(domain(format!(
                "invalid 2x2 table ({y_t}/{n_t}, {y_c}/{n_c})"
            )));
        }
        Ok(Counts2x2 { y_t, n_t, y_c, n_c })
    }
}

/// Shape parameters of a Beta distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
            return Err(domain(format!(
                "Beta shapes must be positive and finite, got ({a}, {b})"
            )));
        }
        Ok(BetaParams { a, b })
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn variance(&self) -> f64 {
        let s = self.a + self.b;
        self.a * self.b / (s * s * (s + 1.0))
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        (self.a - 1.0) * x.ln() + (self.b - 1.0) * (-x).ln_1p() - ln_beta(self.a, self.b)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            beta_reg(self.a, self.b, x)
        }
    }
}

/// `ln B(a, b)` with input validation.
pub fn log_beta_fn(a: f64, b: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
        return Err(domain(format!(
            "log_beta_fn requires a, b > 0, got ({a}, {b})"
        )));
    }
    Ok(ln_beta(a, b))
}

/// Unchecked `ln B(a, b)`; callers guarantee positive finite shapes.
///
/// Large arguments go through Stirling remainders so that `ln Γ` cancellation does not eat the
/// relative precision (e.g. `B(2.5, 1e6)`).
pub fn ln_beta(a: f64, b: f64) -> f64 {
    let (p, q) = if a <= b { (a, b) } else { (b, a) };
    let s = p + q;
    if p >= 10.0 {
        let corr = stirling_remainder(p) + stirling_remainder(q) - stirling_remainder(s);
        -0.5 * q.ln() + LN_SQRT_2PI + corr + (p - 0.5) * (p / s).ln() + q * (-p / s).ln_1p()
    } else if q >= 10.0 {
        let corr = stirling_remainder(q) - stirling_remainder(s);
        ln_gamma(p) + corr + p - p * s.ln() + (q - 0.5) * (-p / s).ln_1p()
    } else {
        ln_gamma(p) + ln_gamma(q) - ln_gamma(s)
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln Γ(x) - [(x - 1/2) ln x - x + ln √(2π)]` for `x >= 10`.
fn stirling_remainder(x: f64) -> f64 {
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
    ];
    let x2 = 1.0 / (x * x);
    let mut acc = 0.0;
    for c in C.iter().rev() {
        acc = acc * x2 + c;
    }
    acc / x
}

/// `ln C(n, k)`.
#[inline]
pub fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Binomial probability mass over `0..=n` at success probability `p`.
pub fn binomial_pmf_vec(n: u64, p: f64) -> Vec<f64> {
    let n_us = n as usize;
    if p <= 0.0 {
        let mut v = vec![0.0; n_us + 1];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; n_us + 1];
        v[n_us] = 1.0;
        return v;
    }
    let lp = p.ln();
    let lq = (-p).ln_1p();
    let lf = ln_factorials(n);
    (0..=n_us)
        .map(|k| (lf[n_us] - lf[k] - lf[n_us - k] + k as f64 * lp + (n_us - k) as f64 * lq).exp())
        .collect()
}

/// Upper tails `S[d] = P(Y >= d)` for `d in 0..=n+1` of a Binomial(n, p).
pub fn binomial_upper_tails(n: u64, p: f64) -> Vec<f64> {
    let pmf = binomial_pmf_vec(n, p);
    let mut tails = vec![0.0; pmf.len() + 1];
    for d in (0..pmf.len()).rev() {
        tails[d] = tails[d + 1] + pmf[d];
    }
    tails
}

pub(crate) fn ln_factorials(n: u64) -> Vec<f64> {
    let mut lf = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    lf.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        lf.push(acc);
    }
    lf
}

/// Unnormalized hypergeometric weights of arm-1 responder counts, scaled to 1 at the mode.
/// Returns `(lowest support value, weights)`.
fn hypergeometric_weights(tbl: &Counts2x2) -> (u64, Vec<f64>) {
    let m = tbl.y_t + tbl.y_c;
    let (n1, n2) = (tbl.n_t, tbl.n_c);
    let lo = m.saturating_sub(n2);
    let hi = n1.min(m);
    let total = n1 + n2;
    let mode = (((m + 1) * (n1 + 1)) / (total + 2)).clamp(lo, hi);
    let mut w = vec![0.0; (hi - lo + 1) as usize];
    let at = |x: u64| (x - lo) as usize;
    w[at(mode)] = 1.0;
    let mut x = mode;
    while x < hi {
        let (xf, n1f, n2f, mf) = (x as f64, n1 as f64, n2 as f64, m as f64);
        w[at(x + 1)] = w[at(x)] * (n1f - xf) * (mf - xf) / ((xf + 1.0) * (n2f - mf + xf + 1.0));
        x += 1;
    }
    let mut x = mode;
    while x > lo {
        let (xf, n1f, n2f, mf) = (x as f64, n1 as f64, n2 as f64, m as f64);
        w[at(x - 1)] = w[at(x)] * xf * (n2f - mf + xf) / ((n1f - xf + 1.0) * (mf - xf + 1.0));
        x -= 1;
    }
    (lo, w)
}

/// One-sided Fisher exact p-value for a higher response rate in arm 1:
/// `P(X >= y_t)` under the hypergeometric law with both margins fixed.
pub fn fisher_exact_one_sided(tbl: &Counts2x2) -> f64 {
    let (lo, w) = hypergeometric_weights(tbl);
    let total: f64 = w.iter().sum();
    let start = (tbl.y_t - lo) as usize;
    let tail: f64 = w[start..].iter().sum();
    (tail / total).min(1.0)
}

/// Two-sided Fisher exact p-value using the minimum-likelihood rule: sum of the probabilities
/// of all tables no more likely than the observed one (relative slack 1e-7).
pub fn fisher_exact_two_sided(tbl: &Counts2x2) -> f64 {
    let (lo, w) = hypergeometric_weights(tbl);
    let total: f64 = w.iter().sum();
    let obs = w[(tbl.y_t - lo) as usize] * (1.0 + 1e-7);
    let p: f64 = w.iter().filter(|&&v| v <= obs).sum();
    (p / total).min(1.0)
}

/// Risk difference with a continuity-corrected Wald interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `y_t/n_t - y_c/n_c` with the Yates-corrected Wald interval at confidence `level`,
/// clamped to [-1, 1].
pub fn prop_diff_ci_cc(tbl: &Counts2x2, level: f64) -> Result<DiffInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(domain(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    let (nt, nc) = (tbl.n_t as f64, tbl.n_c as f64);
    let pt = tbl.y_t as f64 / nt;
    let pc = tbl.y_c as f64 / nc;
    let delta = pt - pc;
    let inv_sum = 1.0 / nt + 1.0 / nc;
    let yates = 0.5f64.min(delta.abs() / inv_sum);
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    let width = z * (pt * (1.0 - pt) / nt + pc * (1.0 - pc) / nc).sqrt() + yates * inv_sum;
    Ok(DiffInterval {
        estimate: delta,
        lower: (delta - width).max(-1.0),
        upper: (delta + width).min(1.0),
    })
}

const SERIES_MAX_SHAPE: f64 = 10_000.0;

/// `Pr[X > Y]` for independent `X ~ Beta(x)` and `Y ~ Beta(y)`.
///
/// Uses the finite series in Beta functions when `x.a` is an integer no larger than 10,000 and
/// adaptive 64-node Gauss–Legendre on `∫ f_X(t) F_Y(t) dt` otherwise.
pub fn beta_superiority(x: &BetaParams, y: &BetaParams) -> Result<f64> {
    if x.a.fract() == 0.0 && x.a >= 1.0 && x.a <= SERIES_MAX_SHAPE {
        Ok(superiority_series(x.a as u64, x.b, y.a, y.b))
    } else {
        superiority_quadrature(x, y)
    }
}

/// Series path: `sum_{s<alpha1} B(g+s, b1+d) / ((b1+s) B(g,d) B(s+1,b1))`, summed in the log
/// domain with the term ratio `(g+s)(b1+s) / ((g+s+b1+d)(s+1))`.
pub fn superiority_series(alpha1: u64, beta1: f64, g: f64, d: f64) -> f64 {
    // s = 0 term: B(g, b1+d) / B(g, d), since B(1, b1) = 1/b1
    let mut lt = ln_beta(g, beta1 + d) - ln_beta(g, d);
    let mut max = lt;
    let mut acc = 1.0;
    for s in 0..alpha1.saturating_sub(1) {
        let sf = s as f64;
        lt += ((g + sf) * (beta1 + sf)).ln() - ((g + sf + beta1 + d) * (sf + 1.0)).ln();
        if lt > max {
            acc = acc * (max - lt).exp() + 1.0;
            max = lt;
        } else {
            acc += (lt - max).exp();
        }
    }
    (max + acc.ln()).exp().clamp(0.0, 1.0)
}

/// Quadrature path over the CDF form, tolerance 1e-10.
///
/// Integrates on the logit scale, `t = 1/(1+e^-s)`, which turns the endpoint singularities of
/// shapes below one into exponentially decaying tails. The truncation points leave less than
/// 1e-13 of the mass of `X` outside.
pub fn superiority_quadrature(x: &BetaParams, y: &BetaParams) -> Result<f64> {
    const TAIL: f64 = 1e-13;
    let lb = ln_beta(x.a, x.b);
    // P(X < t) <= t^a / (a B(a,b)) near zero, symmetric bound near one
    let t_lo = ((TAIL.ln() + x.a.ln() + lb) / x.a).exp().min(0.5);
    let t_hi = ((TAIL.ln() + x.b.ln() + lb) / x.b).exp().min(0.5);
    let logit = |t: f64| t.ln() - (-t).ln_1p();
    let (s_lo, s_hi) = (logit(t_lo.max(1e-300)), -logit(t_hi.max(1e-300)));
    let integrand = |s: f64| {
        let t = 1.0 / (1.0 + (-s).exp());
        let u = 1.0 / (1.0 + s.exp());
        if t <= 0.0 || u <= 0.0 {
            return 0.0;
        }
        // f_X(t) * t(1-t) = t^a (1-t)^b / B(a,b)
        let g = (x.a * t.ln() + x.b * u.ln() - lb).exp();
        g * beta_reg(y.a, y.b, t)
    };
    let m = logit(x.mean().clamp(1e-12, 1.0 - 1e-12)).clamp(s_lo, s_hi);
    let left = quadrature::adaptive(s_lo, m, 5e-11, integrand)?;
    let right = quadrature::adaptive(m, s_hi, 5e-11, integrand)?;
    let p = left + right;
    if !(-1e-9..=1.0 + 1e-9).contains(&p) {
        return Err(numeric(
            "beta_superiority",
            format!(
                "quadrature returned {p} for X~Beta({}, {}), Y~Beta({}, {})",
                x.a, x.b, y.a, y.b
            ),
        ));
    }
    Ok(p.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(y_t: u64, n_t: u64, y_c: u64, n_c: u64) -> Counts2x2 {
        Counts2x2::new(y_t, n_t, y_c, n_c).unwrap()
    }

    #[test]
    fn log_beta_known_values() {
        assert!(log_beta_fn(1.0, 1.0).unwrap().abs() < 1e-15);
        assert!((log_beta_fn(2.0, 3.0).unwrap() - (1.0f64 / 12.0).ln()).abs() < 1e-14);
        // mpmath.log(mpmath.beta(15.5, 11.2)) at 50 digits
        let oracle = -18.166_675_943_954_537;
        let v = log_beta_fn(15.5, 11.2).unwrap();
        assert!(((v - oracle) / oracle).abs() < 1e-12, "{v}");
        // more mpmath values, covering the Stirling branches
        for &(a, b, want) in &[
            (0.5, 0.5, 1.144_729_885_849_400_2),
            (2.5, 1e6, -34.254_095_399_436_516),
            (1e6, 1e6, -1_386_300.003_362_921_1),
            (123.25, 0.01, 4.551_377_945_403_711_4),
            (7.0, 3000.0, -49.472_316_711_423_504),
            (1e-3, 4.5, 6.905_789_890_105_201),
            (33.3, 66.6, -64.215_953_519_455_929),
        ] {
            let v = log_beta_fn(a, b).unwrap();
            assert!(
                ((v - want) / want).abs() < 1e-12,
                "lnB({a}, {b}) = {v}, want {want}"
            );
        }
    }

    #[test]
    fn log_beta_rejects_bad_input() {
        assert!(log_beta_fn(0.0, 1.0).is_err());
        assert!(log_beta_fn(1.0, f64::NAN).is_err());
        assert!(log_beta_fn(-2.0, 1.0).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(Counts2x2::new(3, 2, 0, 1).is_err());
        assert!(Counts2x2::new(0, 0, 0, 1).is_err());
    }

    #[test]
    fn fisher_one_sided_examples() {
        let p = fisher_exact_one_sided(&t(14, 24, 1, 6));
        assert!((p - 0.084).abs() < 5e-4, "{p}");
        assert_eq!(fisher_exact_one_sided(&t(0, 10, 0, 10)), 1.0);
    }

    #[test]
    fn fisher_two_sided_examples() {
        assert!((fisher_exact_two_sided(&t(5, 10, 5, 10)) - 1.0).abs() < 1e-12);
        assert!(fisher_exact_two_sided(&t(0, 30, 15, 30)) < 0.10);
    }

    #[test]
    fn ci_matches_published_separate_row() {
        let ci = prop_diff_ci_cc(&t(14, 24, 1, 6), 0.95).unwrap();
        assert!((ci.estimate - 0.417).abs() < 1e-3);
        assert!((ci.lower + 0.045).abs() < 1e-3);
        assert!((ci.upper - 0.878).abs() < 1e-3);
    }

    #[test]
    fn ci_identical_arms() {
        let ci = prop_diff_ci_cc(&t(7, 19, 7, 19), 0.9).unwrap();
        assert_eq!(ci.estimate, 0.0);
        assert!(ci.lower < 0.0 && ci.upper > 0.0);
        assert!(prop_diff_ci_cc(&t(7, 19, 7, 19), 1.0).is_err());
    }

    #[test]
    fn superiority_examples() {
        let u = BetaParams::new(1.0, 1.0).unwrap();
        assert!((beta_superiority(&u, &u).unwrap() - 0.5).abs() < 1e-14);
        let p = beta_superiority(
            &BetaParams::new(15.0, 11.0).unwrap(),
            &BetaParams::new(2.0, 6.0).unwrap(),
        )
        .unwrap();
        assert!((p - 0.959).abs() < 1e-3, "{p}");
    }

    #[test]
    fn series_matches_quadrature_path() {
        for &(a, b, g, d) in &[
            (3.0, 7.0, 4.0, 6.0),
            (40.0, 2.5, 7.3, 0.8),
            (1.0, 0.5, 0.5, 9.0),
        ] {
            let x = BetaParams::new(a, b).unwrap();
            let y = BetaParams::new(g, d).unwrap();
            let s = superiority_series(a as u64, b, g, d);
            let q = superiority_quadrature(&x, &y).unwrap();
            assert!((s - q).abs() < 1e-10, "{a} {b} {g} {d}: {s} vs {q}");
        }
    }

    #[test]
    fn series_survives_large_trials() {
        // n = 3000 scale: no overflow or underflow
        let p = superiority_series(1_801, 601.0, 301.0, 301.0);
        assert!(p > 0.999_999 && p <= 1.0);
        // scipy quad of f_X * F_Y: 3.4673030290774e-06
        let p = superiority_series(301, 2_101.0, 120.0, 482.0);
        assert!((p - 3.467_303_029_077_4e-6).abs() < 1e-15, "{p}");
    }
}
