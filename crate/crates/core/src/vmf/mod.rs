//! von Mises-Fisher distribution on the unit sphere in R^M.
//!
//! Density `q(z | mu, kappa) = C_M(kappa) exp(kappa mu^T z)` with the
//! standard normalizer `C_M(kappa) = kappa^{M/2-1} / ((2 pi)^{M/2} I_{M/2-1}(kappa))`.
//!
//! Two samplers are provided. [`sample`] is Wood's rejection sampler and is
//! used where no gradient is needed. [`sample_reparameterized`] draws the
//! scalar component `omega = mu^T z` by inverting its marginal CDF, so the
//! sample is a deterministic, differentiable function of `(mu, kappa)` and the
//! noise `(u, v)`.

pub mod bessel;
pub mod quadrature;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
pub use bessel::{bessel_ratio, log_bessel_i, log_bessel_ratio, BesselEval};
use quadrature::gauss_legendre_64;

pub const KAPPA_MIN: f64 = 1e-4;
pub const KAPPA_MAX: f64 = 1e4;
const UNIT_TOL: f64 = 1e-8;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    /// Normalizes `mu` and clamps `kappa` into `[KAPPA_MIN, KAPPA_MAX]`.
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::InvalidInput("vMF needs dimension >= 2".into()));
        }
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(Error::InvalidInput(format!(
                "kappa must be finite and >= 0, got {kappa}"
            )));
        }
        let norm = l2(&mu);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidInput("mu must be a nonzero finite vector".into()));
        }
        Ok(VmfParams {
            mu: mu.into_iter().map(|x| x / norm).collect(),
            kappa: kappa.clamp(KAPPA_MIN, KAPPA_MAX),
        })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `nu = M/2 - 1`, the Bessel order for dimension `M`.
fn order(m: usize) -> f64 {
    m as f64 / 2.0 - 1.0
}

/// `log C_M(kappa)`; `kappa = 0` gives minus the log surface area of the sphere.
pub fn log_normalizer(kappa: f64, m: usize) -> Result<f64> {
    let nu = order(m);
    let base = nu * 2f64.ln() + ln_gamma(nu + 1.0) - 0.5 * m as f64 * (2.0 * PI).ln();
    if kappa == 0.0 {
        return Ok(base);
    }
    Ok(base - bessel::log_series_factor(nu, kappa)?)
}

/// Mean resultant length `A_M(kappa) = I_{M/2}(kappa) / I_{M/2-1}(kappa)`.
pub fn mean_resultant_length(kappa: f64, m: usize) -> Result<f64> {
    if kappa == 0.0 {
        return Ok(0.0);
    }
    bessel_ratio(order(m), kappa)
}

pub fn log_density(z: &[f64], params: &VmfParams) -> Result<f64> {
    if z.len() != params.dim() {
        return Err(Error::Dimension(format!(
            "z has {} entries, mu has {}",
            z.len(),
            params.dim()
        )));
    }
    if (l2(z) - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput("z must lie on the unit sphere".into()));
    }
    Ok(log_normalizer(params.kappa, params.dim())? + params.kappa * dot(&params.mu, z))
}

/// `KL(vMF(mu, kappa) || uniform)`, independent of `mu`. Exactly 0 at kappa = 0.
pub fn kl_to_uniform(kappa: f64, m: usize) -> Result<f64> {
    check_kl_args(kappa, m)?;
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let nu = order(m);
    // kappa A + log C_M(kappa) - log C_M(0) = kappa A - log S_nu(kappa)
    let a = bessel_ratio(nu, kappa)?;
    let log_s = bessel::log_series_factor(nu, kappa)?;
    Ok(kappa * a - log_s)
}

/// `d KL / d kappa = kappa A'(kappa)` with `A' = 1 - A^2 - (M-1) A / kappa`.
pub fn kl_to_uniform_grad(kappa: f64, m: usize) -> Result<f64> {
    check_kl_args(kappa, m)?;
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let a = bessel_ratio(order(m), kappa)?;
    Ok(kappa * (1.0 - a * a) - (m as f64 - 1.0) * a)
}

fn check_kl_args(kappa: f64, m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::InvalidInput("vMF needs dimension >= 2".into()));
    }
    if !kappa.is_finite() || !(0.0..=KAPPA_MAX).contains(&kappa) {
        return Err(Error::InvalidInput(format!("kappa {kappa} outside [0, {KAPPA_MAX}]")));
    }
    Ok(())
}

/// Householder reflection taking the north pole e_1 to `mu`.
#[derive(Debug, Clone)]
struct Householder {
    w: Vec<f64>,
    norm_sq: f64,
}

impl Householder {
    fn new(mu: &[f64]) -> Self {
        let mut w: Vec<f64> = mu.iter().map(|x| -x).collect();
        w[0] += 1.0;
        let norm_sq = dot(&w, &w);
        Householder { w, norm_sq }
    }

    fn is_identity(&self) -> bool {
        self.norm_sq < 1e-300
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return x.to_vec();
        }
        let c = 2.0 * dot(&self.w, x) / self.norm_sq;
        x.iter().zip(&self.w).map(|(xi, wi)| xi - c * wi).collect()
    }

    /// Gradient with respect to `mu` of `g . H(mu) x`.
    fn grad_mu(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return vec![0.0; x.len()];
        }
        let n = self.norm_sq;
        let c = dot(&self.w, x);
        let gw = dot(g, &self.w);
        // d/dw of -2 (g.w)(w.x)/n, then mu = e_1 - w flips the sign
        (0..x.len())
            .map(|i| 2.0 * (gw * x[i] / n + c * g[i] / n - 2.0 * c * gw * self.w[i] / (n * n)))
            .collect()
    }
}

/// Wood's rejection sampler.
pub fn sample<R: Rng + ?Sized>(params: &VmfParams, rng: &mut R) -> Result<Vec<f64>> {
    let m = params.dim();
    let kappa = params.kappa;
    let mf = (m - 1) as f64;
    let b = mf / (2.0 * kappa + (4.0 * kappa * kappa + mf * mf).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + mf * (1.0 - x0 * x0).ln();
    let beta = Beta::new(0.5 * mf, 0.5 * mf).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut omega = None;
    for _ in 0..MAX_REJECTIONS {
        let zb: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * zb) / (1.0 - (1.0 - b) * zb);
        let u: f64 = rng.gen();
        if kappa * w + mf * (1.0 - x0 * w).ln() - c >= u.ln() {
            omega = Some(w);
            break;
        }
    }
    let omega =
        omega.ok_or_else(|| Error::Numerical(format!("vMF rejection sampler exceeded {MAX_REJECTIONS} iterations")))?;
    let v = uniform_tangent(m, rng);
    Ok(assemble(params, omega, (1.0 - omega * omega).max(0.0).sqrt(), &v))
}

/// Uniform direction on the unit sphere in R^{m-1}.
pub fn uniform_tangent<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m - 1).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = l2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn north_pole_point(omega: f64, sin: f64, v: &[f64]) -> Vec<f64> {
    let mut zp = Vec::with_capacity(v.len() + 1);
    zp.push(omega);
    zp.extend(v.iter().map(|x| sin * x));
    zp
}

fn assemble(params: &VmfParams, omega: f64, sin: f64, v: &[f64]) -> Vec<f64> {
    Householder::new(&params.mu).apply(&north_pole_point(omega, sin, v))
}

/// Noise for the reparameterized sampler: `u` in (0, 1) picks the quantile of
/// `omega`, `v` is a unit vector in R^{M-1}.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfNoise {
    pub u: f64,
    pub v: Vec<f64>,
}

impl VmfNoise {
    pub fn draw<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        let mut u: f64 = rng.gen();
        while u <= 0.0 {
            u = rng.gen();
        }
        VmfNoise {
            u,
            v: uniform_tangent(m, rng),
        }
    }
}

/// A reparameterized draw plus what its backward pass needs.
#[derive(Debug, Clone)]
pub struct ReparamSample {
    pub z: Vec<f64>,
    pub omega: f64,
    /// `d omega / d kappa` at fixed `u`.
    pub domega_dkappa: f64,
    sin: f64,
    v: Vec<f64>,
    rotation: Householder,
}

impl ReparamSample {
    /// Pulls an upstream gradient on `z` back to `(mu, kappa)`.
    pub fn backward(&self, grad_z: &[f64]) -> (Vec<f64>, f64) {
        let zp = north_pole_point(self.omega, self.sin, &self.v);
        let grad_mu = self.rotation.grad_mu(&zp, grad_z);
        // d z'/d omega = (1, -omega/sin v)
        let slope = if self.sin > 1e-12 { -self.omega / self.sin } else { 0.0 };
        let dzp = north_pole_point(1.0, slope, &self.v);
        let dz = self.rotation.apply(&dzp);
        let grad_kappa = dot(grad_z, &dz) * self.domega_dkappa;
        (grad_mu, grad_kappa)
    }
}

/// Unnormalized density of `y = 1 - omega`: `exp(-kappa y) (y (2 - y))^a`
/// with `a = (M - 3) / 2`, and the running integrals needed to invert it.
struct OmegaMarginal {
    kappa: f64,
    m: usize,
    a: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Integrals {
    mass: f64,
    /// integral of -y times the density, i.e. d mass / d kappa
    dkappa: f64,
}

impl std::ops::Add for Integrals {
    type Output = Integrals;
    fn add(self, o: Integrals) -> Integrals {
        Integrals {
            mass: self.mass + o.mass,
            dkappa: self.dkappa + o.dkappa,
        }
    }
}

impl OmegaMarginal {
    fn new(kappa: f64, m: usize) -> Self {
        OmegaMarginal {
            kappa,
            m,
            a: (m as f64 - 3.0) / 2.0,
        }
    }

    fn density(&self, y: f64) -> f64 {
        (-self.kappa * y).exp() * (y * (2.0 - y)).powf(self.a)
    }

    fn half_power(&self, base: f64) -> f64 {
        if self.a == 0.0 {
            1.0
        } else {
            base.powf(self.a)
        }
    }

    /// Integral over y in [0, y0]. Uses y = r^2 on [0, 1] and y = 2 - s^2
    /// on [1, 2], which makes both integrands smooth for every M >= 2.
    fn integrate(&self, y0: f64) -> Integrals {
        let gl = gauss_legendre_64();
        let pm = (self.m - 2) as i32;
        let mut total = Integrals::default();
        let r_hi = y0.min(1.0).sqrt();
        if r_hi > 0.0 {
            let near = |r: f64| {
                let y = r * r;
                let f = 2.0 * (-self.kappa * y).exp() * r.powi(pm) * self.half_power(2.0 - y);
                (f, -y * f)
            };
            for (lo, hi) in self.panels(r_hi) {
                let mut acc = Integrals::default();
                gl_pair(gl, lo, hi, near, &mut acc);
                total = total + acc;
            }
        }
        if y0 > 1.0 {
            let s_lo = (2.0 - y0).max(0.0).sqrt();
            let far = |s: f64| {
                let y = 2.0 - s * s;
                let f = 2.0 * (-self.kappa * y).exp() * s.powi(pm) * self.half_power(y);
                (f, -y * f)
            };
            let mut acc = Integrals::default();
            gl_pair(gl, s_lo, 1.0, far, &mut acc);
            total = total + acc;
        }
        total
    }

    /// Panels on [0, r_hi] refined geometrically around the width
    /// 1/sqrt(kappa) of the concentrated peak.
    fn panels(&self, r_hi: f64) -> Vec<(f64, f64)> {
        let width = 1.0 / self.kappa.max(1.0).sqrt();
        let mut edges = vec![0.0];
        let mut e = width;
        while e < r_hi {
            edges.push(e);
            e *= 2.0;
        }
        edges.push(r_hi);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

fn gl_pair(gl: &quadrature::GaussLegendre, lo: f64, hi: f64, f: impl Fn(f64) -> (f64, f64), acc: &mut Integrals) {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
        let (a, b) = f(mid + half * x);
        acc.mass += w * a * half;
        acc.dkappa += w * b * half;
    }
}

/// Draws `z` as a deterministic function of `(params, noise)`.
///
/// `omega` solves `F(omega; kappa) = u` for the marginal CDF `F`, to within
/// 1e-10 in the quantile (in practice to machine precision, the final steps
/// are Newton steps); `d omega / d kappa = -(dF/dkappa) / (dF/domega)` by
/// implicit differentiation.
pub fn sample_reparameterized(params: &VmfParams, noise: &VmfNoise) -> Result<ReparamSample> {
    let m = params.dim();
    if noise.v.len() != m - 1 {
        return Err(Error::Dimension(format!("tangent noise must have {} entries", m - 1)));
    }
    if !(noise.u > 0.0 && noise.u < 1.0) {
        return Err(Error::InvalidInput(format!("u must be in (0, 1), got {}", noise.u)));
    }
    let marginal = OmegaMarginal::new(params.kappa, m);
    let full = marginal.integrate(2.0);
    // the upper tail in omega is the lower range of y
    let target = (1.0 - noise.u) * full.mass;

    let (mut lo, mut hi) = (0.0f64, 2.0f64);
    let mut y = (0.5 * (m as f64 - 1.0) / params.kappa).clamp(1e-12, 1.0);
    let mut converged = false;
    for _ in 0..200 {
        let t = marginal.integrate(y).mass - target;
        if t > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let g = marginal.density(y);
        let newton = y - t / g;
        let next = if g.is_finite() && g > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - y).abs();
        y = next;
        if step < 1e-15 * y.max(1e-300) || hi - lo < 1e-300 {
            converged = true;
            break;
        }
    }
    if !converged && hi - lo > 1e-10 {
        return Err(Error::Numerical(format!(
            "vMF quantile inversion failed at kappa={}, u={}",
            params.kappa, noise.u
        )));
    }
    let part = marginal.integrate(y);
    let g = marginal.density(y);
    let q = 1.0 - noise.u;
    let domega_dkappa = (part.dkappa - q * full.dkappa) / g;
    if !domega_dkappa.is_finite() {
        return Err(Error::Numerical("non-finite d omega / d kappa".into()));
    }
    let omega = 1.0 - y;
    let sin = (y * (2.0 - y)).max(0.0).sqrt();
    let rotation = Householder::new(&params.mu);
    let z = rotation.apply(&north_pole_point(omega, sin, &noise.v));
    Ok(ReparamSample {
        z,
        omega,
        domega_dkappa,
        sin,
        v: noise.v.clone(),
        rotation,
    })
}
