//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

use statrs::function::gamma::ln_gamma;

/// Tanh-sinh quadrature of `f` over `[a, b]` with step `h = 1/64`.
pub fn tanh_sinh<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    let h = 1.0 / 64.0;
    let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
    let mut sum = 0.0;
    for k in -220i32..=220 {
        let t = k as f64 * h;
        let u = FRAC_PI_2 * t.sinh();
        let x = c + r * u.tanh();
        let w = r * FRAC_PI_2 * t.cosh() / u.cosh().powi(2);
        if w == 0.0 || x <= a || x >= b {
            continue;
        }
        sum += w * f(x);
    }
    sum * h
}

pub fn beta_pdf(a: f64, b: f64, x: f64) -> f64 {
    let lb = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - lb).exp()
}

/// `Pr[X > Y]`, `X ~ Beta(a1, b1)`, `Y ~ Beta(a2, b2)`, as the double integral
/// `∫ f_X(t) ∫_0^t f_Y(u) du dt`.
pub fn superiority_2d(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    tanh_sinh(0.0, 1.0, |t| {
        beta_pdf(a1, b1, t) * tanh_sinh(0.0, t, |u| beta_pdf(a2, b2, u))
    })
}

fn choose(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// One-sided Fisher p-value `P(X >= y_t)` by exact integer enumeration of the hypergeometric
/// law; valid while `C(n_t + n_c, m)` fits in 128 bits.
pub fn fisher_enumerated(y_t: u64, n_t: u64, y_c: u64, n_c: u64) -> f64 {
    let m = y_t + y_c;
    let lo = m.saturating_sub(n_c);
    let hi = m.min(n_t);
    let mut tail: u128 = 0;
    let mut total: u128 = 0;
    for x in lo..=hi {
        let w = choose(n_t, x) * choose(n_c, m - x);
        total += w;
        if x >= y_t {
            tail += w;
        }
    }
    tail as f64 / total as f64
}
