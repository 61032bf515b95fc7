//! Entropy-regularized optimal transport between topics and seed groups.
//!
//! The cost matrix is stored group-major (`|G| x |T|`, entry `(g, t)` is
//! `1 - mean_{x in g} phi_t(x)`), the plan topic-major (`|T| x |G|`). The
//! solver minimizes `<P, M> - h(P) / lambda` over plans with uniform
//! marginals, so a larger `lambda` means a sharper plan.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this value of `lambda * max(M)` the solver runs in log space.
const LOG_DOMAIN_THRESHOLD: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    m: Array2<f64>,
}

impl CostMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::InvalidInput("cost matrix is empty".into()));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix { m })
    }

    pub fn num_groups(&self) -> usize {
        self.m.nrows()
    }

    pub fn num_topics(&self) -> usize {
        self.m.ncols()
    }

    /// Group-major view, `|G| x |T|`.
    pub fn as_array(&self) -> &Array2<f64> {
        &self.m
    }

    fn max(&self) -> f64 {
        self.m.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `M[g][t] = 1 - mean over the seeds of group g of their weight on topic t`.
///
/// `seed_topic_dists[g]` holds the topic distributions of group `g`'s seeds.
pub fn build_cost_matrix(seed_topic_dists: &[Vec<Vec<f64>>]) -> Result<CostMatrix> {
    let num_topics = seed_topic_dists
        .iter()
        .flatten()
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::InvalidInput("no seed distributions".into()))?;
    let mut m = Array2::zeros((seed_topic_dists.len(), num_topics));
    for (g, dists) in seed_topic_dists.iter().enumerate() {
        if dists.is_empty() {
            return Err(Error::InvalidInput(format!("seed group {g} is empty")));
        }
        for d in dists {
            if d.len() != num_topics {
                return Err(Error::Dimension(format!(
                    "group {g}: topic distribution of length {} (expected {num_topics})",
                    d.len()
                )));
            }
            let s: f64 = d.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("group {g}: distribution sums to {s}")));
            }
        }
        let n = dists.len() as f64;
        for t in 0..num_topics {
            let mean = dists.iter().map(|d| d[t]).sum::<f64>() / n;
            m[[g, t]] = 1.0 - mean;
        }
    }
    CostMatrix::new(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            lambda: 50.0,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `|T| x |G|`.
    pub p: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// `h(P) = -sum P log P`.
    pub fn entropy(&self) -> f64 {
        -self.p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
    }

    /// `sum_{t,g} P[t][g] M[g][t]`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.p.indexed_iter().map(|((t, g), &x)| x * cost.m[[g, t]]).sum()
    }

    /// Largest absolute deviation from either marginal.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self.p.sum_axis(Axis(1));
        let cols = self.p.sum_axis(Axis(0));
        let r = (&rows - &self.row_marginal).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let c = (&cols - &self.col_marginal).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        r.max(c)
    }

    /// For each group, the topic carrying most of its mass (lowest index on ties).
    pub fn group_argmax(&self) -> Vec<usize> {
        (0..self.p.ncols())
            .map(|g| {
                let col = self.p.column(g);
                let mut best = 0;
                for t in 1..col.len() {
                    if col[t] > col[best] {
                        best = t;
                    }
                }
                best
            })
            .collect()
    }
}

/// Alternating marginal scaling with uniform marginals `r = 1/|T|`,
/// `c = 1/|G|`.
pub fn sinkhorn_plan(cost: &CostMatrix, lambda: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    let nt = cost.num_topics();
    let ng = cost.num_groups();
    let r = Array1::from_elem(nt, 1.0 / nt as f64);
    let c = Array1::from_elem(ng, 1.0 / ng as f64);
    // topic-major scaled costs
    let scaled = cost.m.t().mapv(|x| lambda * x);
    if lambda * cost.max() > LOG_DOMAIN_THRESHOLD {
        log_domain(&scaled, r, c, max_iter, tol)
    } else {
        kernel_domain(&scaled, r, c, max_iter, tol)
    }
}

pub fn sinkhorn_with(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    sinkhorn_plan(cost, cfg.lambda, cfg.max_iter, cfg.tol)
}

fn kernel_domain(
    scaled: &Array2<f64>,
    r: Array1<f64>,
    c: Array1<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let k = scaled.mapv(|x| (-x).exp());
    if let Some(t) = k.sum_axis(Axis(1)).iter().position(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::Numerical(format!("Sinkhorn kernel row {t} underflowed to zero")));
    }
    let mut u = Array1::<f64>::ones(r.len());
    let mut v = Array1::<f64>::ones(c.len());
    let mut iterations_used = 0;
    let mut converged = false;
    for it in 1..=max_iter.max(1) {
        u = &r / &k.dot(&v);
        v = &c / &k.t().dot(&u);
        iterations_used = it;
        // columns are exact after the v-step; check rows
        let rows = &u * &k.dot(&v);
        let err = (&rows - &r).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if !err.is_finite() {
            return Err(Error::Numerical("Sinkhorn scaling diverged".into()));
        }
        if err < tol {
            converged = true;
            break;
        }
    }
    let p = Array2::from_shape_fn(k.dim(), |(t, g)| u[t] * k[[t, g]] * v[g]);
    Ok(TransportPlan {
        p,
        row_marginal: r,
        col_marginal: c,
        iterations_used,
        converged,
    })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_domain(
    scaled: &Array2<f64>,
    r: Array1<f64>,
    c: Array1<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (nt, ng) = scaled.dim();
    let log_r = r.mapv(f64::ln);
    let log_c = c.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(nt);
    let mut g = Array1::<f64>::zeros(ng);
    let mut iterations_used = 0;
    let mut converged = false;
    for it in 1..=max_iter.max(1) {
        for t in 0..nt {
            f[t] = log_r[t] - log_sum_exp((0..ng).map(|j| g[j] - scaled[[t, j]]));
        }
        for j in 0..ng {
            g[j] = log_c[j] - log_sum_exp((0..nt).map(|t| f[t] - scaled[[t, j]]));
        }
        iterations_used = it;
        let mut err = 0.0f64;
        for t in 0..nt {
            let row = (f[t] + log_sum_exp((0..ng).map(|j| g[j] - scaled[[t, j]]))).exp();
            err = err.max((row - r[t]).abs());
        }
        if !err.is_finite() || f.iter().chain(g.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical(
                "log-domain Sinkhorn produced non-finite potentials".into(),
            ));
        }
        if err < tol {
            converged = true;
            break;
        }
    }
    let p = Array2::from_shape_fn((nt, ng), |(t, j)| (f[t] + g[j] - scaled[[t, j]]).exp());
    Ok(TransportPlan {
        p,
        row_marginal: r,
        col_marginal: c,
        iterations_used,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct OtLoss {
    pub loss: f64,
    /// `dL/dM`, group-major like the cost matrix: the plan, transposed.
    pub grad: Array2<f64>,
    pub plan: TransportPlan,
}

/// `L = <P*, M> - h(P*) / lambda` and its envelope gradient `dL/dM = P*`
/// (the plan is held fixed).
pub fn ot_loss_and_gradient(cost: &CostMatrix, lambda: f64) -> Result<OtLoss> {
    let cfg = SinkhornConfig {
        lambda,
        ..SinkhornConfig::default()
    };
    ot_loss_with(cost, &cfg)
}

pub fn ot_loss_with(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<OtLoss> {
    let plan = sinkhorn_with(cost, cfg)?;
    Ok(ot_loss_for_plan(cost, plan, cfg.lambda))
}

/// Loss and gradient of a given (possibly stale) plan against a cost matrix.
pub fn ot_loss_for_plan(cost: &CostMatrix, plan: TransportPlan, lambda: f64) -> OtLoss {
    let loss = plan.transport_cost(cost) - plan.entropy() / lambda;
    OtLoss {
        loss,
        grad: plan.p.t().to_owned(),
        plan,
    }
}
