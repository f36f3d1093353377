//! Meta-analytic-predictive prior: a normal random-effects model on the log-odds of the
//! historical control rates, integrated by tensor Gauss quadrature, whose predictive for a new
//! study is then approximated by a Beta mixture fitted with EM.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::digamma;

use crate::error::{domain, Error, Result};
use crate::exact::{ln_beta, BetaParams};
use crate::mixture::BetaMixture;
use crate::pool::HistoricalPool;
use crate::quadrature::Rule;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const SHAPE_FLOOR: f64 = 1e-3;
const SHAPE_CAP: f64 = 1e7;
/// Log-likelihoods entering the AIC are scaled to this many draws, whatever the draw count.
const AIC_DRAWS: f64 = 20_000.0;
const TAU_PANELS: [f64; 7] = [0.0, 0.125, 0.25, 0.5, 1.0, 2.0, 5.0];
const TV_LIMIT: f64 = 0.01;

/// Priors of the hierarchical model: `mu ~ N(mu_mean, mu_sd^2)`, `tau ~ HalfNormal(tau_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchicalHyperPrior {
    pub mu_mean: f64,
    pub mu_sd: f64,
    pub tau_scale: f64,
}

impl Default for HierarchicalHyperPrior {
    fn default() -> Self {
        HierarchicalHyperPrior {
            mu_mean: 0.0,
            mu_sd: 2.0,
            tau_scale: 1.0,
        }
    }
}

impl HierarchicalHyperPrior {
    pub fn new(mu_mean: f64, mu_sd: f64, tau_scale: f64) -> Result<Self> {
        let h = HierarchicalHyperPrior {
            mu_mean,
            mu_sd,
            tau_scale,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu_mean.is_finite()
            || !(self.mu_sd > 0.0 && self.mu_sd.is_finite())
            || !(self.tau_scale > 0.0 && self.tau_scale.is_finite())
        {
            return Err(domain(format!("invalid hyper-prior {self:?}")));
        }
        Ok(())
    }
}

/// Resolution of the fit. `fine` is used for single fits, `simulation` inside the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFitSettings {
    /// Gauss–Legendre nodes per tau panel.
    pub tau_nodes: usize,
    /// Gauss–Hermite nodes over mu for each tau.
    pub mu_nodes: usize,
    /// Gauss–Hermite nodes over each study's log-odds.
    pub theta_nodes: usize,
    /// Points of the predictive CDF grid used for inversion.
    pub grid_points: usize,
    /// Quantile-spaced draws handed to EM.
    pub draws: usize,
    /// When positive, EM runs on this many equal-width log-odds cells weighted by their
    /// predictive mass instead of on quantile draws.
    #[serde(default)]
    pub em_cells: usize,
    /// Largest K considered by AIC.
    pub max_components: usize,
    /// Largest K tried when no AIC candidate meets the total-variation bound.
    pub max_escalated_components: usize,
    pub em_max_iter: usize,
    /// Convergence threshold on the mean per-draw log-likelihood.
    pub em_tol: f64,
    /// Double the quadrature until predictive mean and variance move less than 1e-4.
    pub refine: bool,
    /// Compute the total-variation distance of the fitted mixture to the predictive.
    pub check_tv: bool,
}

impl MapFitSettings {
    pub fn fine() -> Self {
        MapFitSettings {
            tau_nodes: 8,
            mu_nodes: 24,
            theta_nodes: 41,
            grid_points: 512,
            draws: 20_000,
            em_cells: 0,
            max_components: 4,
            max_escalated_components: 6,
            em_max_iter: 5_000,
            em_tol: 1e-7,
            refine: true,
            check_tv: true,
        }
    }

    pub fn simulation() -> Self {
        MapFitSettings {
            tau_nodes: 4,
            mu_nodes: 12,
            theta_nodes: 15,
            grid_points: 256,
            draws: 2_000,
            em_cells: 256,
            max_components: 4,
            max_escalated_components: 4,
            em_max_iter: 1_000,
            em_tol: 1e-7,
            refine: false,
            check_tv: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tau_nodes == 0
            || self.mu_nodes == 0
            || self.theta_nodes == 0
            || self.grid_points < 16
            || self.draws < 100
            || self.max_components == 0
            || self.em_max_iter == 0
            || !(self.em_tol > 0.0)
        {
            return Err(domain(format!("invalid MAP fit settings {self:?}")));
        }
        Ok(())
    }

    fn doubled(&self) -> Self {
        MapFitSettings {
            tau_nodes: self.tau_nodes * 2,
            mu_nodes: self.mu_nodes * 2,
            theta_nodes: self.theta_nodes * 2 - 1,
            ..self.clone()
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

fn ln_normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    -0.5 * z * z - s.ln() - LN_SQRT_2PI
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gauss–Hermite rule prepared for `∫ f(x) dx ≈ Σ exp(lw_q) f(c + sqrt2·s·x_q)` with the
/// `exp(x²)` factor folded into the log weights.
struct HermiteLog {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl HermiteLog {
    fn new(n: usize) -> Self {
        let r = Rule::hermite(n);
        let log_weights = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w.ln() + x * x)
            .collect();
        HermiteLog {
            nodes: r.nodes,
            log_weights,
        }
    }
}

fn expectation_rule() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| Rule::hermite(32))
}

/// Predictive distribution of a new study's log-odds: a finite mixture of normals
/// `N(mu_j, tau_j^2)` with the posterior quadrature weights of the `(mu, tau)` nodes.
#[derive(Debug, Clone)]
pub struct Predictive {
    weights: Vec<f64>,
    mus: Vec<f64>,
    taus: Vec<f64>,
}

impl Predictive {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// CDF of the predictive log-odds.
    pub fn cdf_logit(&self, theta: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.mus.iter().zip(&self.taus))
            .map(|(w, (m, t))| w * std_normal_cdf((theta - m) / t))
            .sum()
    }

    /// Density of the predictive log-odds.
    pub fn pdf_logit(&self, theta: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.mus.iter().zip(&self.taus))
            .map(|(w, (m, t))| w * ln_normal_pdf(theta, *m, *t).exp())
            .sum()
    }

    /// Density of the predictive response rate.
    pub fn pdf(&self, x: f64) -> f64 {
        if !(x > 0.0 && x < 1.0) {
            return 0.0;
        }
        self.pdf_logit(x.ln() - (-x).ln_1p()) / (x * (1.0 - x))
    }

    fn moments(&self) -> (f64, f64) {
        let r = expectation_rule();
        let (mut m1, mut m2) = (0.0, 0.0);
        for (w, (mu, tau)) in self.weights.iter().zip(self.mus.iter().zip(&self.taus)) {
            for (x, q) in r.nodes.iter().zip(&r.weights) {
                let p = expit(mu + std::f64::consts::SQRT_2 * tau * x);
                let wq = w * q / PI.sqrt();
                m1 += wq * p;
                m2 += wq * p * p;
            }
        }
        (m1, (m2 - m1 * m1).max(0.0))
    }

    /// Mean of the predictive response rate.
    pub fn mean(&self) -> f64 {
        self.moments().0
    }

    /// Variance of the predictive response rate.
    pub fn variance(&self) -> f64 {
        self.moments().1
    }

    fn quantile_logit_bracket(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (m, t) in self.mus.iter().zip(&self.taus) {
            lo = lo.min(m - 12.0 * t);
            hi = hi.max(m + 12.0 * t);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_logit(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Midpoints and probability masses of `cells` equal-width log-odds cells spanning the
    /// 1e-9 and 1 - 1e-9 quantiles; empty cells are dropped.
    pub fn mass_cells(&self, cells: usize) -> (Vec<f64>, Vec<f64>) {
        let lo = self.quantile_logit_bracket(1e-9);
        let hi = self.quantile_logit_bracket(1.0 - 1e-9);
        let h = (hi - lo) / cells as f64;
        let mut points = Vec::with_capacity(cells);
        let mut masses = Vec::with_capacity(cells);
        let mut prev = self.cdf_logit(lo);
        for c in 0..cells {
            let next = self.cdf_logit(lo + h * (c + 1) as f64);
            let m = next - prev;
            if m > 0.0 {
                points.push(lo + h * (c as f64 + 0.5));
                masses.push(m);
            }
            prev = next;
        }
        (points, masses)
    }

    /// Log-odds at the quantiles `(i + 0.5) / n`, obtained by inverting a cubic Hermite
    /// interpolant of the CDF on `grid_points` nodes between the 1e-9 and 1 - 1e-9 quantiles.
    pub fn quantile_logits(&self, n: usize, grid_points: usize) -> Vec<f64> {
        let lo = self.quantile_logit_bracket(1e-9);
        let hi = self.quantile_logit_bracket(1.0 - 1e-9);
        let h = (hi - lo) / (grid_points - 1) as f64;
        let grid: Vec<f64> = (0..grid_points).map(|g| lo + h * g as f64).collect();
        let cdf: Vec<f64> = grid.iter().map(|&t| self.cdf_logit(t)).collect();
        let pdf: Vec<f64> = grid.iter().map(|&t| self.pdf_logit(t)).collect();
        let mut out = Vec::with_capacity(n);
        let mut g = 0usize;
        for i in 0..n {
            let u = (i as f64 + 0.5) / n as f64;
            while g + 2 < grid_points && cdf[g + 1] < u {
                g += 1;
            }
            out.push(invert_hermite_cell(
                u,
                grid[g],
                h,
                (cdf[g], cdf[g + 1]),
                (pdf[g], pdf[g + 1]),
            ));
        }
        out
    }
}

// cubic Hermite CDF on one cell, inverted by safeguarded Newton
fn invert_hermite_cell(u: f64, x0: f64, h: f64, f: (f64, f64), d: (f64, f64)) -> f64 {
    let (f0, f1) = f;
    let (d0, d1) = (d.0 * h, d.1 * h);
    let eval = |t: f64| {
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * f0
            + (t3 - 2.0 * t2 + t) * d0
            + (-2.0 * t3 + 3.0 * t2) * f1
            + (t3 - t2) * d1;
        let dv = (6.0 * t2 - 6.0 * t) * f0
            + (3.0 * t2 - 4.0 * t + 1.0) * d0
            + (-6.0 * t2 + 6.0 * t) * f1
            + (3.0 * t2 - 2.0 * t) * d1;
        (v, dv)
    };
    if u <= f0 {
        return x0;
    }
    if u >= f1 {
        return x0 + h;
    }
    let (mut a, mut b) = (0.0, 1.0);
    let mut t = ((u - f0) / (f1 - f0)).clamp(0.0, 1.0);
    for _ in 0..60 {
        let (v, dv) = eval(t);
        let r = v - u;
        if r < 0.0 {
            a = t;
        } else {
            b = t;
        }
        let mut next = if dv > 0.0 { t - r / dv } else { f64::NAN };
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if (next - t).abs() < 1e-14 {
            t = next;
            break;
        }
        t = next;
    }
    x0 + h * t
}

/// Per-trial normal approximation of the binomial log-likelihood on the log-odds scale.
fn trial_approximations(pool: &HistoricalPool) -> Vec<(f64, f64, f64, f64)> {
    pool.trials()
        .iter()
        .map(|t| {
            let (y, n) = (t.responders as f64, t.size as f64);
            let p = (y + 0.5) / (n + 1.0);
            let c = p.ln() - (-p).ln_1p();
            let v = 1.0 / ((n + 1.0) * p * (1.0 - p));
            (y, n - y, c, v)
        })
        .collect()
}

/// Log marginal likelihood of one trial given `(mu, tau)` (binomial coefficient omitted),
/// by Gauss–Hermite centred on the normal approximation of the integrand.
fn ln_trial_marginal(
    rule: &HermiteLog,
    scratch: &mut Vec<f64>,
    (y, f, c, v): (f64, f64, f64, f64),
    mu: f64,
    tau: f64,
) -> f64 {
    // Laplace centring: Newton on the log-integrand from its normal approximation
    let n = y + f;
    let itau2 = 1.0 / (tau * tau);
    let mut centre = (c / v + mu * itau2) / (1.0 / v + itau2);
    let mut curv = 1.0 / v + itau2;
    for _ in 0..8 {
        let p = expit(centre);
        let grad = y - n * p - (centre - mu) * itau2;
        curv = n * p * (1.0 - p) + itau2;
        let step = (grad / curv).clamp(-2.0, 2.0);
        centre += step;
        if step.abs() < 1e-6 {
            break;
        }
    }
    let s = 1.25 / curv.sqrt();
    let scale = std::f64::consts::SQRT_2 * s;
    let ln_scale = scale.ln();
    scratch.clear();
    for (x, lw) in rule.nodes.iter().zip(&rule.log_weights) {
        let th = centre + scale * x;
        let ll = -y * softplus(-th) - f * softplus(th);
        scratch.push(lw + ln_scale + ll + ln_normal_pdf(th, mu, tau));
    }
    log_sum_exp(scratch)
}

/// Posterior quadrature over `(mu, tau)` and the resulting predictive for a new study.
pub fn map_predictive(
    pool: &HistoricalPool,
    hyper: &HierarchicalHyperPrior,
    settings: &MapFitSettings,
) -> Result<Predictive> {
    hyper.validate()?;
    settings.validate()?;
    if pool.is_empty() {
        return Err(domain("MAP predictive needs at least one historical trial"));
    }
    let trials = trial_approximations(pool);
    let theta_rule = HermiteLog::new(settings.theta_nodes);
    let mu_rule = HermiteLog::new(settings.mu_nodes);
    let tau_rule = Rule::legendre(settings.tau_nodes);
    let mut scratch = Vec::with_capacity(settings.theta_nodes);

    let cap = settings.tau_nodes * (TAU_PANELS.len() - 1) * settings.mu_nodes;
    let mut logw = Vec::with_capacity(cap);
    let mut mus = Vec::with_capacity(cap);
    let mut taus = Vec::with_capacity(cap);
    let ts = hyper.tau_scale;
    for panel in TAU_PANELS.windows(2) {
        let (a, b) = (panel[0] * ts, panel[1] * ts);
        let half = 0.5 * (b - a);
        for (xt, wt) in tau_rule.nodes.iter().zip(&tau_rule.weights) {
            let tau = 0.5 * (a + b) + half * xt;
            // half-normal density, 2 N(tau; 0, s)
            let lw_tau = (wt * half).ln() + std::f64::consts::LN_2 + ln_normal_pdf(tau, 0.0, ts);
            // Gaussian approximation of mu | tau
            let mut prec = 1.0 / (hyper.mu_sd * hyper.mu_sd);
            let mut num = hyper.mu_mean * prec;
            for &(_, _, c, v) in &trials {
                let w = 1.0 / (v + tau * tau);
                prec += w;
                num += w * c;
            }
            let centre = num / prec;
            let scale = std::f64::consts::SQRT_2 * 1.5 / prec.sqrt();
            for (xm, lwm) in mu_rule.nodes.iter().zip(&mu_rule.log_weights) {
                let mu = centre + scale * xm;
                let mut lw =
                    lw_tau + lwm + scale.ln() + ln_normal_pdf(mu, hyper.mu_mean, hyper.mu_sd);
                for &t in &trials {
                    lw += ln_trial_marginal(&theta_rule, &mut scratch, t, mu, tau);
                }
                logw.push(lw);
                mus.push(mu);
                taus.push(tau);
            }
        }
    }
    let total = log_sum_exp(&logw);
    if !total.is_finite() {
        return Err(Error::Fit(format!(
            "posterior quadrature over (mu, tau) degenerate (log normaliser {total})"
        )));
    }
    // Within each tau slice the mu nodes are replaced by normal kernels of width
    // KERNEL * sd(mu | tau), pulled towards the slice mean so that the slice mean and
    // variance are unchanged. Without this the predictive is a comb whenever tau is small
    // against the node spacing.
    const KERNEL: f64 = 0.6;
    let shrink = (1.0 - KERNEL * KERNEL).sqrt();
    let mut pred = Predictive {
        weights: Vec::with_capacity(logw.len()),
        mus: Vec::with_capacity(logw.len()),
        taus: Vec::with_capacity(logw.len()),
    };
    let m = settings.mu_nodes;
    for slice in 0..logw.len() / m {
        let range = slice * m..(slice + 1) * m;
        let ws: Vec<f64> = logw[range.clone()]
            .iter()
            .map(|lw| (lw - total).exp())
            .collect();
        let mass: f64 = ws.iter().sum();
        if !(mass > 1e-15) {
            continue;
        }
        let mu = &mus[range.clone()];
        let mean = ws.iter().zip(mu).map(|(w, x)| w * x).sum::<f64>() / mass;
        let var = ws
            .iter()
            .zip(mu)
            .map(|(w, x)| w * (x - mean) * (x - mean))
            .sum::<f64>()
            / mass;
        let h = KERNEL * var.sqrt();
        let tau = taus[slice * m];
        let sd = (tau * tau + h * h).sqrt();
        for (w, x) in ws.iter().zip(mu) {
            if *w > 1e-15 {
                pred.weights.push(*w);
                pred.mus.push(mean + shrink * (x - mean));
                pred.taus.push(sd);
            }
        }
    }
    let kept: f64 = pred.weights.iter().sum();
    pred.weights.iter_mut().for_each(|w| *w /= kept);
    Ok(pred)
}

/// Trigamma function by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc + r
        + 0.5 * r2
        + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0))))
}

/// Beta maximum-likelihood given the mean log sufficient statistics
/// `s1 = E[ln x]`, `s2 = E[ln(1-x)]`, by Newton ascent from `start`.
pub fn beta_mle(s1: f64, s2: f64, start: (f64, f64)) -> (f64, f64) {
    let objective = |a: f64, b: f64| (a - 1.0) * s1 + (b - 1.0) * s2 - ln_beta(a, b);
    let (mut a, mut b) = (
        start.0.clamp(SHAPE_FLOOR, SHAPE_CAP),
        start.1.clamp(SHAPE_FLOOR, SHAPE_CAP),
    );
    let mut obj = objective(a, b);
    for _ in 0..100 {
        let dab = digamma(a + b);
        let g1 = s1 - digamma(a) + dab;
        let g2 = s2 - digamma(b) + dab;
        let tab = trigamma(a + b);
        let h11 = tab - trigamma(a);
        let h22 = tab - trigamma(b);
        let h12 = tab;
        let det = h11 * h22 - h12 * h12;
        // Hessian is negative definite; det > 0 up to rounding
        let (mut da, mut db) = if det > 0.0 {
            (-(h22 * g1 - h12 * g2) / det, -(h11 * g2 - h12 * g1) / det)
        } else {
            (g1 * a * a, g2 * b * b)
        };
        // full Newton steps near the optimum; halving only guards against overshoot
        for _ in 0..60 {
            let na = (a + da).clamp(SHAPE_FLOOR, SHAPE_CAP);
            let nb = (b + db).clamp(SHAPE_FLOOR, SHAPE_CAP);
            let no = objective(na, nb);
            if no >= obj - 1e-12 * (1.0 + obj.abs()) {
                a = na;
                b = nb;
                obj = obj.max(no);
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if da.abs() <= 1e-13 * a && db.abs() <= 1e-13 * b {
            break;
        }
    }
    (a, b)
}

/// Outcome of one EM run at a fixed number of components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    pub components: usize,
    /// Mean log-likelihood per draw.
    pub mean_log_lik: f64,
    pub aic: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub mixture: Option<BetaMixture>,
}

fn moment_match(xs: &[f64], ws: &[f64]) -> (f64, f64) {
    let n: f64 = ws.iter().sum();
    let m = (xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / n).clamp(1e-6, 1.0 - 1e-6);
    let mut v = xs
        .iter()
        .zip(ws)
        .map(|(x, w)| w * (x - m) * (x - m))
        .sum::<f64>()
        / n;
    let vmax = m * (1.0 - m);
    if !(v > 0.0) || v >= vmax {
        v = 0.5 * vmax;
    }
    let common = vmax / v - 1.0;
    (
        (m * common).clamp(SHAPE_FLOOR, SHAPE_CAP),
        ((1.0 - m) * common).clamp(SHAPE_FLOOR, SHAPE_CAP),
    )
}

struct EmData {
    lx: Vec<f64>,
    l1x: Vec<f64>,
    /// Normalised point weights.
    w: Vec<f64>,
}

/// Packed parameters: log weights, then log a, then log b.
fn unpack(x: &[f64], k: usize) -> (Vec<f64>, Vec<(f64, f64)>) {
    let max = x[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = x[..k].iter().map(|v| (v - max).exp()).collect();
    let tot: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / tot).collect();
    let params = (0..k)
        .map(|j| {
            (
                x[k + j].exp().clamp(SHAPE_FLOOR, SHAPE_CAP),
                x[2 * k + j].exp().clamp(SHAPE_FLOOR, SHAPE_CAP),
            )
        })
        .collect();
    (weights, params)
}

fn pack(weights: &[f64], params: &[(f64, f64)]) -> Vec<f64> {
    let mut x: Vec<f64> = weights.iter().map(|w| w.max(1e-300).ln()).collect();
    x.extend(params.iter().map(|p| p.0.ln()));
    x.extend(params.iter().map(|p| p.1.ln()));
    x
}

/// One EM update; returns the mean log-likelihood at `x` and the updated parameters.
fn em_step(data: &EmData, x: &[f64], k: usize) -> (f64, Vec<f64>) {
    let (weights, params) = unpack(x, k);
    let consts: Vec<f64> = params
        .iter()
        .zip(&weights)
        .map(|(&(a, b), w)| {
            if *w > 0.0 {
                w.ln() - ln_beta(a, b)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut lp = vec![0.0; k];
    let mut r_sum = vec![0.0; k];
    let mut s1 = vec![0.0; k];
    let mut s2 = vec![0.0; k];
    let mut ll = 0.0;
    for ((&lx, &l1x), &wi) in data.lx.iter().zip(&data.l1x).zip(&data.w) {
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            let (a, b) = params[j];
            lp[j] = consts[j] + (a - 1.0) * lx + (b - 1.0) * l1x;
            max = max.max(lp[j]);
        }
        let mut tot = 0.0;
        for v in lp.iter_mut() {
            *v = (*v - max).exp();
            tot += *v;
        }
        ll += wi * (max + tot.ln());
        for j in 0..k {
            let r = wi * lp[j] / tot;
            r_sum[j] += r;
            s1[j] += r * lx;
            s2[j] += r * l1x;
        }
    }
    let mut new_w = vec![0.0; k];
    let mut new_p = params.clone();
    for j in 0..k {
        new_w[j] = r_sum[j];
        if r_sum[j] > 1e-9 {
            new_p[j] = beta_mle(s1[j] / r_sum[j], s2[j] / r_sum[j], params[j]);
        }
    }
    (ll, pack(&new_w, &new_p))
}

/// EM for a `k`-component Beta mixture on draws given as log-odds, sorted ascending.
/// Initialised by moment matching on `k` equal-count contiguous blocks and accelerated by
/// squared extrapolation (SQUAREM) with a monotonicity safeguard.
pub fn fit_beta_mixture_em(
    logits: &[f64],
    k: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ComponentFit> {
    let w = vec![1.0 / logits.len().max(1) as f64; logits.len()];
    fit_beta_mixture_em_weighted(logits, &w, k, max_iter, tol)
}

/// Weighted EM on log-odds points sorted ascending; `weights` are normalised internally.
/// Initial blocks hold equal shares of the total weight.
pub fn fit_beta_mixture_em_weighted(
    logits: &[f64],
    weights: &[f64],
    k: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ComponentFit> {
    let n = logits.len();
    if k == 0 || n < 2 * k {
        return Err(domain(format!("cannot fit {k} components to {n} points")));
    }
    if weights.len() != n || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(domain("EM weights must be non-negative, one per point"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(domain("EM weights must have a positive finite sum"));
    }
    let data = EmData {
        lx: logits.iter().map(|t| -softplus(-t)).collect(),
        l1x: logits.iter().map(|t| -softplus(*t)).collect(),
        w: weights.iter().map(|w| w / total).collect(),
    };
    let xs: Vec<f64> = logits.iter().map(|t| expit(*t)).collect();
    let mut block = Vec::with_capacity(n);
    let mut cum = 0.0;
    for w in &data.w {
        block.push((((cum + 0.5 * w) * k as f64) as usize).min(k - 1));
        cum += w;
    }
    let init: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let lo = block.partition_point(|&b| b < j);
            let hi = block.partition_point(|&b| b <= j);
            if hi > lo {
                moment_match(&xs[lo..hi], &data.w[lo..hi])
            } else {
                moment_match(&xs, &data.w)
            }
        })
        .collect();
    let mut x0 = pack(&vec![1.0 / k as f64; k], &init);

    let mut prev = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut mean_ll;
    loop {
        let (ll0, x1) = em_step(&data, &x0, k);
        iterations += 1;
        mean_ll = ll0;
        if !ll0.is_finite() {
            return Err(Error::Fit(format!(
                "EM log-likelihood not finite at K = {k}"
            )));
        }
        if (ll0 - prev).abs() < tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        prev = ll0;
        let (ll1, x2) = em_step(&data, &x1, k);
        iterations += 1;
        let r: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = x2
            .iter()
            .zip(&x1)
            .zip(&r)
            .map(|((a, b), r)| a - b - r)
            .collect();
        let nr = r.iter().map(|z| z * z).sum::<f64>().sqrt();
        let nv = v.iter().map(|z| z * z).sum::<f64>().sqrt();
        if !(nv > 0.0) || !nr.is_finite() {
            x0 = x2;
            continue;
        }
        let alpha = (-nr / nv).min(-1.0);
        let xp: Vec<f64> = x0
            .iter()
            .zip(&r)
            .zip(&v)
            .map(|((x, r), v)| x - 2.0 * alpha * r + alpha * alpha * v)
            .collect();
        let (llp, x3) = em_step(&data, &xp, k);
        iterations += 1;
        x0 = if llp.is_finite() && llp >= ll1 {
            x3
        } else {
            x2
        };
    }
    let (weights, params) = unpack(&x0, k);
    let comps = params
        .iter()
        .map(|&(a, b)| BetaParams::new(a, b))
        .collect::<Result<Vec<_>>>()?;
    let mixture = BetaMixture::new(weights, comps)?;
    let n_par = (3 * k - 1) as f64;
    Ok(ComponentFit {
        components: k,
        mean_log_lik: mean_ll,
        aic: -2.0 * mean_ll * AIC_DRAWS + 2.0 * n_par,
        iterations,
        converged,
        mixture: Some(mixture),
    })
}

/// Fitted MAP prior together with fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapFit {
    pub mixture: BetaMixture,
    pub predictive_mean: f64,
    pub predictive_sd: f64,
    /// Total-variation distance between mixture and quadrature predictive, when computed.
    pub tv_distance: Option<f64>,
    pub candidates: Vec<ComponentFit>,
    /// Quadrature doublings performed during refinement.
    pub refinements: usize,
    pub quadrature_nodes: usize,
}

/// Predictive at the requested resolution, doubled until mean and variance settle.
fn refined_predictive(
    pool: &HistoricalPool,
    hyper: &HierarchicalHyperPrior,
    settings: &MapFitSettings,
) -> Result<(Predictive, usize)> {
    let mut s = settings.clone();
    let mut pred = map_predictive(pool, hyper, &s)?;
    if !settings.refine {
        return Ok((pred, 0));
    }
    let mut mom = pred.moments();
    for doubling in 1..=3 {
        s = s.doubled();
        let next = map_predictive(pool, hyper, &s)?;
        let nm = next.moments();
        let settled = (nm.0 - mom.0).abs() < 1e-4 && (nm.1 - mom.1).abs() < 1e-4;
        pred = next;
        mom = nm;
        if settled {
            return Ok((pred, doubling));
        }
    }
    Err(Error::Fit(format!(
        "predictive moments still moving after 3 quadrature doublings (mean {:.6}, var {:.6})",
        mom.0, mom.1
    )))
}

/// Total-variation distance between a Beta mixture and the predictive, on the log-odds scale.
pub fn tv_distance(mix: &BetaMixture, pred: &Predictive) -> f64 {
    let lo = pred.quantile_logit_bracket(1e-9) - 1.0;
    let hi = pred.quantile_logit_bracket(1.0 - 1e-9) + 1.0;
    let m = 4096;
    let h = (hi - lo) / m as f64;
    let mut tv = 0.0;
    for g in 0..=m {
        let t = lo + h * g as f64;
        let x = expit(t);
        let f = mix.pdf(x) * x * (1.0 - x);
        let w = if g == 0 || g == m { 0.5 } else { 1.0 };
        tv += w * (f - pred.pdf_logit(t)).abs();
    }
    // mass of the mixture outside the window
    let outside = mix.cdf(expit(lo)) + (1.0 - mix.cdf(expit(hi)));
    0.5 * (tv * h + outside)
}

/// Fits the MAP prior with the fine settings.
pub fn fit_map_prior(
    pool: &HistoricalPool,
    hyper: &HierarchicalHyperPrior,
    n_components: Option<usize>,
) -> Result<BetaMixture> {
    Ok(fit_map_prior_with(pool, hyper, n_components, &MapFitSettings::fine())?.mixture)
}

/// Fits the MAP prior: quadrature predictive, quantile draws, EM for each candidate `K`,
/// AIC choice (ties to the smaller `K`). Candidates whose EM did not converge are skipped.
pub fn fit_map_prior_with(
    pool: &HistoricalPool,
    hyper: &HierarchicalHyperPrior,
    n_components: Option<usize>,
    settings: &MapFitSettings,
) -> Result<MapFit> {
    if pool.len() < 2 {
        return Err(domain(format!(
            "MAP prior needs at least 2 historical trials, got {}",
            pool.len()
        )));
    }
    settings.validate()?;
    let (pred, refinements) = refined_predictive(pool, hyper, settings)?;
    let (logits, point_w) = if settings.em_cells > 0 {
        pred.mass_cells(settings.em_cells)
    } else {
        let l = pred.quantile_logits(settings.draws, settings.grid_points);
        let w = vec![1.0; l.len()];
        (l, w)
    };
    let ks: Vec<usize> = match n_components {
        Some(0) => return Err(domain("number of mixture components must be positive")),
        Some(k) => vec![k],
        None => (1..=settings.max_components).collect(),
    };
    let mut candidates = Vec::with_capacity(ks.len());
    for k in ks {
        candidates.push(fit_beta_mixture_em_weighted(
            &logits,
            &point_w,
            k,
            settings.em_max_iter,
            settings.em_tol,
        )?);
    }
    // ascending AIC, near-ties resolved towards smaller K
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].converged)
        .collect();
    if order.is_empty() {
        return Err(Error::Fit(format!(
            "EM did not converge within {} iterations for any K",
            settings.em_max_iter
        )));
    }
    order.sort_by(|&i, &j| {
        let (ai, aj) = (candidates[i].aic, candidates[j].aic);
        if (ai - aj).abs() <= 1e-9 {
            candidates[i].components.cmp(&candidates[j].components)
        } else {
            ai.total_cmp(&aj)
        }
    });
    let (mean, var) = pred.moments();
    let mut best_tv = f64::INFINITY;
    let mut chosen = None;
    for &i in &order {
        let mix = candidates[i]
            .mixture
            .clone()
            .expect("EM result carries its mixture");
        if !settings.check_tv {
            chosen = Some((mix, None));
            break;
        }
        let d = tv_distance(&mix, &pred);
        best_tv = best_tv.min(d);
        if d <= TV_LIMIT {
            chosen = Some((mix, Some(d)));
            break;
        }
    }
    // heavy-tailed predictives may need more components than the AIC range offers
    if chosen.is_none() && n_components.is_none() {
        for k in settings.max_components + 1..=settings.max_escalated_components {
            let fit = fit_beta_mixture_em_weighted(
                &logits,
                &point_w,
                k,
                settings.em_max_iter,
                settings.em_tol,
            )?;
            let mix = fit.mixture.clone().expect("EM result carries its mixture");
            let converged = fit.converged;
            candidates.push(fit);
            if !converged {
                continue;
            }
            let d = tv_distance(&mix, &pred);
            best_tv = best_tv.min(d);
            if d <= TV_LIMIT {
                chosen = Some((mix, Some(d)));
                break;
            }
        }
    }
    let (mixture, tv) = chosen.ok_or_else(|| {
        Error::Fit(format!(
            "no mixture within total variation {TV_LIMIT} of the predictive (best {best_tv:.4})"
        ))
    })?;
    for c in candidates.iter_mut() {
        c.mixture = None;
    }
    Ok(MapFit {
        mixture,
        predictive_mean: mean,
        predictive_sd: var.sqrt(),
        tv_distance: tv,
        candidates,
        refinements,
        quadrature_nodes: pred.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature;

    fn as_pool() -> HistoricalPool {
        HistoricalPool::from_counts(&[
            (23, 107),
            (12, 44),
            (19, 51),
            (9, 39),
            (39, 139),
            (6, 20),
            (9, 78),
            (10, 35),
        ])
        .unwrap()
    }

    #[test]
    fn trigamma_values() {
        // psi_1(1) = pi^2/6, psi_1(1/2) = pi^2/2
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - PI * PI / 2.0).abs() < 1e-12);
        assert!((trigamma(1e4) - (1e-4 + 0.5e-8 + 1e-12 / 6.0)).abs() < 1e-16);
    }

    #[test]
    fn beta_mle_recovers_parameters() {
        // exact sufficient statistics of Beta(3.5, 7.25)
        let (a, b) = (3.5, 7.25);
        let s1 = digamma(a) - digamma(a + b);
        let s2 = digamma(b) - digamma(a + b);
        let (fa, fb) = beta_mle(s1, s2, (1.0, 1.0));
        assert!((fa - a).abs() < 1e-8 && (fb - b).abs() < 1e-8, "{fa} {fb}");
    }

    #[test]
    fn trial_marginal_matches_adaptive_oracle() {
        let rule = HermiteLog::new(41);
        let mut scratch = Vec::new();
        for &(y, n, mu, tau) in &[
            (6.0f64, 20.0f64, -1.2f64, 0.3f64),
            (0.0, 30.0, -1.4, 2.5),
            (200.0, 1000.0, 0.5, 0.05),
            (30.0, 30.0, -2.0, 1.0),
        ] {
            let p = (y + 0.5) / (n + 1.0);
            let t = (
                y,
                n - y,
                (p / (1.0 - p)).ln(),
                1.0 / ((n + 1.0) * p * (1.0 - p)),
            );
            let got = ln_trial_marginal(&rule, &mut scratch, t, mu, tau);
            let lf =
                |th: f64| -y * softplus(-th) - (n - y) * softplus(th) + ln_normal_pdf(th, mu, tau);
            let (lo, hi) = (mu - 40.0 * tau - 40.0, mu + 40.0 * tau + 40.0);
            let peak = (0..=200_000)
                .map(|g| lf(lo + (hi - lo) * g as f64 / 200_000.0))
                .fold(f64::NEG_INFINITY, f64::max);
            let oracle = quadrature::adaptive(lo, hi, 1e-11, |th| (lf(th) - peak).exp())
                .unwrap()
                .ln()
                + peak;
            assert!(
                (got - oracle).abs() < 1e-6,
                "({y},{n},{mu},{tau}): {got} vs {oracle}"
            );
        }
    }

    #[test]
    fn quantile_logits_invert_cdf() {
        let pool = HistoricalPool::from_counts(&[(3, 30), (27, 30)]).unwrap();
        let pred = map_predictive(
            &pool,
            &HierarchicalHyperPrior::default(),
            &MapFitSettings::fine(),
        )
        .unwrap();
        let q = pred.quantile_logits(1000, 512);
        for (i, t) in q.iter().enumerate().step_by(37) {
            let u = (i as f64 + 0.5) / 1000.0;
            assert!((pred.cdf_logit(*t) - u).abs() < 1e-6);
        }
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn as_pool_map_prior() {
        let fit = fit_map_prior_with(
            &as_pool(),
            &HierarchicalHyperPrior::default(),
            None,
            &MapFitSettings::fine(),
        )
        .unwrap();
        let m = fit.mixture.mean();
        assert!((m - 0.25).abs() < 0.02, "mean {m}");
        assert!(fit.tv_distance.unwrap() <= 0.01);
        assert!((m - fit.predictive_mean).abs() < 2e-3);
    }

    #[test]
    fn identical_large_trials() {
        let pool = HistoricalPool::from_counts(&[(200, 1000), (200, 1000)]).unwrap();
        let fit = fit_map_prior_with(
            &pool,
            &HierarchicalHyperPrior::default(),
            None,
            &MapFitSettings::fine(),
        )
        .unwrap();
        // brute-force grid integration over (mu, tau, theta)
        let oracle = 0.219106;
        assert!(
            (fit.predictive_mean - oracle).abs() < 1e-3,
            "{}",
            fit.predictive_mean
        );
        assert!(
            (fit.mixture.mean() - oracle).abs() < 2e-3,
            "{}",
            fit.mixture.mean()
        );
    }

    #[test]
    fn heterogeneity_inflates_spread() {
        let pool = HistoricalPool::from_counts(&[(3, 30), (27, 30)]).unwrap();
        let mix = fit_map_prior(&pool, &HierarchicalHyperPrior::default(), None).unwrap();
        let single_max = [
            BetaParams { a: 4.0, b: 28.0 },
            BetaParams { a: 28.0, b: 4.0 },
        ]
        .iter()
        .map(|c| c.variance())
        .fold(0.0, f64::max);
        assert!(mix.variance() > single_max);
    }

    #[test]
    fn small_tau_scale_approaches_pooled_posterior() {
        let pool = HistoricalPool::from_counts(&[(5, 40), (12, 50), (9, 45)]).unwrap();
        let hyper = HierarchicalHyperPrior::new(0.0, 2.0, 1e-3).unwrap();
        let mix = fit_map_prior(&pool, &hyper, None).unwrap();
        let pooled = BetaParams { a: 26.0, b: 109.0 };
        assert!((mix.mean() - pooled.mean()).abs() <= 0.01, "{}", mix.mean());
    }

    #[test]
    fn em_recovers_two_component_mixture() {
        let truth = BetaMixture::new(
            vec![0.3, 0.7],
            vec![
                BetaParams { a: 4.0, b: 30.0 },
                BetaParams { a: 20.0, b: 25.0 },
            ],
        )
        .unwrap();
        let n = 20_000;
        let logits: Vec<f64> = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if truth.cdf(mid) < u {
                        lo = mid
                    } else {
                        hi = mid
                    }
                }
                let x: f64 = 0.5 * (lo + hi);
                (x / (1.0 - x)).ln()
            })
            .collect();
        let fit = fit_beta_mixture_em(&logits, 2, 5000, 1e-10).unwrap();
        let mix = fit.mixture.unwrap();
        let (w, c) = (mix.weights(), mix.components());
        let i = if c[0].mean() < c[1].mean() { 0 } else { 1 };
        assert!((w[i] - 0.3).abs() < 0.01, "{mix:?}");
        assert!(
            (c[i].a - 4.0).abs() < 0.3 && (c[1 - i].b - 25.0).abs() < 1.5,
            "{mix:?}"
        );
    }
}
