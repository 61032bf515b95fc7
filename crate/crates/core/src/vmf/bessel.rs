//! Modified Bessel functions of the first kind in log space.
//!
//! Three regimes, chosen by `x` relative to `nu + 1`:
//!
//! * `x < 0.1 (nu + 1)`: power series, summed as a correction factor around
//!   the leading term so that `log I` keeps full relative precision as
//!   `x -> 0`.
//! * `x > 50 (nu + 1)`: asymptotic expansion. Hankel's large-argument
//!   series while `4 nu^2 < 2 x` (it terminates for half-integer orders),
//!   otherwise the uniform (Debye) expansion in the order.
//! * otherwise: the all-positive power series in log space for `log I`, and
//!   the Gauss continued fraction (modified Lentz) for the ratio
//!   `I_{nu+1} / I_nu`.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const SMALL: f64 = 0.1;
const LARGE: f64 = 50.0;
const SERIES_MAX_TERMS: usize = 100_000;
const CF_MAX_TERMS: usize = 200_000;

/// `log I_nu(x)` together with `A_nu(x) = I_{nu+1}(x) / I_nu(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BesselEval {
    pub log_i: f64,
    pub ratio: f64,
}

fn check_args(nu: f64, x: f64) -> Result<()> {
    if !nu.is_finite() || nu < 0.0 {
        return Err(Error::InvalidInput(format!(
            "Bessel order must be finite and >= 0, got {nu}"
        )));
    }
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "Bessel argument must be finite and > 0, got {x}"
        )));
    }
    Ok(())
}

fn finite(v: f64, what: &str, nu: f64, x: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} overflowed at nu={nu}, x={x}")))
    }
}

/// Returns `log I_nu(kappa)` and the ratio `I_{nu+1}(kappa) / I_nu(kappa)`.
pub fn log_bessel_ratio(nu: f64, kappa: f64) -> Result<BesselEval> {
    check_args(nu, kappa)?;
    let log_i = log_bessel_i(nu, kappa)?;
    let ratio = bessel_ratio(nu, kappa)?;
    Ok(BesselEval { log_i, ratio })
}

pub fn log_bessel_i(nu: f64, x: f64) -> Result<f64> {
    check_args(nu, x)?;
    let v = if x > LARGE * (nu + 1.0) {
        log_i_asymptotic(nu, x)
    } else {
        nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + log_series_factor_direct(nu, x)?
    };
    finite(v, "log I", nu, x)
}

/// `log I_nu(x) - nu log(x/2) + log Gamma(nu+1)`, i.e. the log of the
/// normalized series `sum_k (x^2/4)^k / (k! (nu+1)_k)`. Tends to 0 as x -> 0
/// and is computed without cancellation there.
pub fn log_series_factor(nu: f64, x: f64) -> Result<f64> {
    check_args(nu, x)?;
    if x > LARGE * (nu + 1.0) {
        let v = log_i_asymptotic(nu, x) - nu * (0.5 * x).ln() + ln_gamma(nu + 1.0);
        finite(v, "log series factor", nu, x)
    } else {
        log_series_factor_direct(nu, x)
    }
}

fn log_series_factor_direct(nu: f64, x: f64) -> Result<f64> {
    let q = 0.25 * x * x;
    if x < SMALL * (nu + 1.0) {
        // sum - 1, accumulated directly so ln_1p keeps precision
        let mut term = 1.0;
        let mut tail = 0.0;
        for k in 1..64 {
            let kf = k as f64;
            term *= q / (kf * (nu + kf));
            tail += term;
            if term < 1e-18 * tail {
                break;
            }
        }
        return Ok(tail.ln_1p());
    }
    // log-space accumulation around the largest term
    let mut log_term = 0.0f64;
    let mut terms = Vec::with_capacity(64);
    terms.push(0.0);
    let mut max_log = 0.0f64;
    let ln_q = q.ln();
    for k in 1..SERIES_MAX_TERMS {
        let kf = k as f64;
        log_term += ln_q - kf.ln() - (nu + kf).ln();
        terms.push(log_term);
        if log_term > max_log {
            max_log = log_term;
        } else if log_term < max_log - 40.0 {
            break;
        }
        if k == SERIES_MAX_TERMS - 1 {
            return Err(Error::Numerical(format!(
                "Bessel series did not converge at nu={nu}, x={x}"
            )));
        }
    }
    let s: f64 = terms.iter().map(|t| (t - max_log).exp()).sum();
    finite(max_log + s.ln(), "Bessel series", nu, x)
}

/// `I_{nu+1}(x) / I_nu(x)`, in (0, 1).
pub fn bessel_ratio(nu: f64, x: f64) -> Result<f64> {
    check_args(nu, x)?;
    if x < SMALL * (nu + 1.0) {
        let s0 = log_series_factor_direct(nu, x)?;
        let s1 = log_series_factor_direct(nu + 1.0, x)?;
        return Ok(0.5 * x / (nu + 1.0) * (s1 - s0).exp());
    }
    if x > LARGE * (nu + 1.0) {
        let r = (log_i_asymptotic(nu + 1.0, x) - log_i_asymptotic(nu, x)).exp();
        return finite(r, "Bessel ratio", nu, x);
    }
    ratio_continued_fraction(nu, x)
}

/// Modified Lentz evaluation of
/// `I_{nu+1}/I_nu = 1 / (2(nu+1)/x + 1 / (2(nu+2)/x + ...))`.
fn ratio_continued_fraction(nu: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let b = |j: usize| 2.0 * (nu + j as f64) / x;
    let mut f = b(1);
    let mut c = f;
    let mut d = 0.0;
    for j in 2..CF_MAX_TERMS {
        d += b(j);
        if d.abs() < TINY {
            d = TINY;
        }
        c = b(j) + 1.0 / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            return finite(1.0 / f, "Bessel ratio", nu, x);
        }
    }
    Err(Error::Numerical(format!(
        "Bessel continued fraction did not converge at nu={nu}, x={x}"
    )))
}

fn log_i_asymptotic(nu: f64, x: f64) -> f64 {
    if 4.0 * nu * nu < 2.0 * x {
        hankel_log_i(nu, x)
    } else {
        debye_log_i(nu, x)
    }
}

/// Hankel's large-argument expansion, terms taken while decreasing.
fn hankel_log_i(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..30 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (kf * 8.0 * x);
        if next == 0.0 {
            break;
        }
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

/// Uniform asymptotic expansion in `nu` with `z = x / nu`, through u_4.
fn debye_log_i(nu: f64, x: f64) -> f64 {
    let root = (nu * nu + x * x).sqrt();
    let t = nu / root;
    let nu_eta = root + nu * (x / (nu + root)).ln();
    let t2 = t * t;
    let u1 = t * (3.0 - 5.0 * t2) / 24.0;
    let u2 = t2 * (81.0 - 462.0 * t2 + 385.0 * t2 * t2) / 1152.0;
    let u3 = t * t2 * (30375.0 - 369603.0 * t2 + 765765.0 * t2 * t2 - 425425.0 * t2 * t2 * t2) / 414720.0;
    let u4 = t2
        * t2
        * (4465125.0 - 94121676.0 * t2 + 349922430.0 * t2 * t2 - 446185740.0 * t2 * t2 * t2
            + 185910725.0 * t2 * t2 * t2 * t2)
        / 39813120.0;
    let inv = 1.0 / nu;
    let corr = 1.0 + inv * (u1 + inv * (u2 + inv * (u3 + inv * u4)));
    // (1+z^2)^{1/4} = sqrt(root / nu)
    nu_eta - 0.5 * (2.0 * PI * nu).ln() - 0.5 * (root / nu).ln() + corr.ln()
}
