//! The training objective of one mini-batch and its exact parameter gradient.

use ndarray::Array2;

use super::{
    deterministic_topics, kd_doc_loss, softmax, softmax_backward, Alignment, DropoutMasks, EncoderTrace, KdTarget,
    ModelParams, TopicModel, LOG_EPS,
};
use crate::corpus::BowDocument;
use crate::error::{Error, Result};
use crate::sinkhorn::{build_cost_matrix, ot_loss_for_plan, ot_loss_with, SinkhornConfig, TransportPlan};
use crate::vmf::{self, VmfNoise, VmfParams};

/// One document of a batch with all of its randomness fixed.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub doc: &'a BowDocument,
    pub noise: VmfNoise,
    pub dropout: Option<DropoutMasks>,
    pub kd: Option<&'a KdTarget>,
}

/// Transport alignment of topics to seed groups.
#[derive(Debug, Clone)]
pub struct OtTerm<'a> {
    /// Seed documents by group index.
    pub seed_groups: Vec<Vec<&'a BowDocument>>,
    /// Plan held fixed during the step. `None` solves one on the current
    /// costs.
    pub plan: Option<&'a TransportPlan>,
    pub sinkhorn: SinkhornConfig,
}

#[derive(Debug, Clone)]
pub struct KdTerm<'a> {
    pub alignment: &'a Alignment,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub recon_weight: f64,
    pub kl_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ot: Option<OtTerm<'a>>,
    pub kd: Option<KdTerm<'a>>,
}

impl Objective<'_> {
    pub fn unsupervised() -> Self {
        Objective {
            recon_weight: 1.0,
            kl_weight: 1.0,
            alpha: 0.0,
            beta: 0.0,
            ot: None,
            kd: None,
        }
    }
}

/// Batch means of the recon and KL terms, the transport loss, and the mean
/// distillation loss over documents with a target.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub ot: f64,
    pub kd: f64,
    pub total: f64,
}

/// Adds the gradient of a loss on `softmax(min(kappa, cap) mu)` to the
/// running `(mu, kappa)` gradients.
fn deterministic_backward(
    trace: &EncoderTrace,
    cap: f64,
    t_d: &[f64],
    g_td: &[f64],
    g_mu: &mut [f64],
    g_kappa: &mut f64,
) {
    let g_logits = softmax_backward(t_d, g_td);
    let scale = trace.kappa.min(cap);
    for (g, gl) in g_mu.iter_mut().zip(&g_logits) {
        *g += scale * gl;
    }
    if trace.kappa < cap {
        *g_kappa += trace.mu.iter().zip(&g_logits).map(|(m, g)| m * g).sum::<f64>();
    }
}

/// Loss of a batch and its gradient with respect to every parameter.
///
/// Terms whose weight is zero are reported but contribute no gradient, so
/// they leave the trajectory bit-identical.
pub fn batch_objective(
    model: &TopicModel,
    items: &[BatchItem<'_>],
    objective: &Objective<'_>,
) -> Result<(LossBreakdown, ModelParams)> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let t_count = model.num_topics();
    let cap = model.config.kappa_cap;
    let n = items.len() as f64;
    let b = model.topic_word_matrix()?;
    let mut g_b = Array2::<f64>::zeros(b.dim());
    let mut grads = model.params.zeros_like();
    let mut out = LossBreakdown::default();

    let kd_active = objective.kd.as_ref().filter(|_| objective.beta != 0.0);
    let n_kd = items.iter().filter(|it| it.kd.is_some()).count();
    let mut kd_sum = 0.0;

    for item in items {
        let trace = model.encode_trace(item.doc, item.dropout.clone())?;
        let params = VmfParams::new(trace.mu.clone(), trace.kappa)?;
        let sample = vmf::sample_reparameterized(&params, &item.noise)?;
        let t = softmax(&sample.z);

        let mut g_t = vec![0.0; t_count];
        for &(w, c) in &item.doc.counts {
            let p: f64 = (0..t_count).map(|k| t[k] * b[[k, w]]).sum();
            out.recon -= c as f64 * (p + LOG_EPS).ln();
            if objective.recon_weight != 0.0 {
                let dp = -objective.recon_weight * c as f64 / (p + LOG_EPS) / n;
                for k in 0..t_count {
                    g_t[k] += dp * b[[k, w]];
                    g_b[[k, w]] += dp * t[k];
                }
            }
        }
        let (mut g_mu, mut g_kappa) = if objective.recon_weight != 0.0 {
            sample.backward(&softmax_backward(&t, &g_t))
        } else {
            (vec![0.0; t_count], 0.0)
        };

        out.kl += vmf::kl_to_uniform(trace.kappa, t_count)?;
        if objective.kl_weight != 0.0 {
            g_kappa += objective.kl_weight * vmf::kl_to_uniform_grad(trace.kappa, t_count)? / n;
        }

        if let (Some(term), Some(target)) = (objective.kd.as_ref(), item.kd) {
            let t_d = deterministic_topics(&trace.mu, trace.kappa, cap);
            let (loss, g_q) = kd_doc_loss(target, &term.alignment.group_mass(&t_d), term.tau);
            kd_sum += loss;
            if kd_active.is_some() {
                let mut g_td = vec![0.0; t_count];
                for (g, gq) in g_q.iter().enumerate() {
                    g_td[term.alignment.topic_of(g)] += objective.beta * gq / n_kd as f64;
                }
                deterministic_backward(&trace, cap, &t_d, &g_td, &mut g_mu, &mut g_kappa);
            }
        }
        model.encoder_backward(&trace, &g_mu, g_kappa, &mut grads);
    }
    out.recon /= n;
    out.kl /= n;
    if n_kd > 0 && objective.kd.is_some() {
        out.kd = kd_sum / n_kd as f64;
    }

    // B = softmax(e_T e_W^T) row by row
    let e_w = model.word_embedding().as_array();
    for k in 0..t_count {
        let row = b.row(k);
        let gr = g_b.row(k);
        let inner = row.dot(&gr);
        let g_logits = &row * &(&gr - inner);
        grads.topic_embedding.row_mut(k).assign(&g_logits.dot(e_w));
    }

    if let Some(term) = &objective.ot {
        out.ot = ot_term(model, term, objective.alpha, &mut grads)?;
    }
    out.total = objective.recon_weight * out.recon + objective.kl_weight * out.kl;
    if objective.ot.is_some() {
        out.total += objective.alpha * out.ot;
    }
    if objective.kd.is_some() {
        out.total += objective.beta * out.kd;
    }
    if !out.total.is_finite() {
        return Err(Error::Numerical("batch loss is not finite".into()));
    }
    Ok((out, grads))
}

fn ot_term(model: &TopicModel, term: &OtTerm<'_>, alpha: f64, grads: &mut ModelParams) -> Result<f64> {
    let cap = model.config.kappa_cap;
    let mut traces = Vec::with_capacity(term.seed_groups.len());
    let mut dists = Vec::with_capacity(term.seed_groups.len());
    for group in &term.seed_groups {
        let mut tr_g = Vec::with_capacity(group.len());
        let mut d_g = Vec::with_capacity(group.len());
        for doc in group {
            let tr = model.encode_trace(doc, None)?;
            d_g.push(deterministic_topics(&tr.mu, tr.kappa, cap));
            tr_g.push(tr);
        }
        traces.push(tr_g);
        dists.push(d_g);
    }
    let cost = build_cost_matrix(&dists)?;
    let ot = match term.plan {
        Some(plan) => {
            if plan.p.dim() != (cost.num_topics(), cost.num_groups()) {
                return Err(Error::Dimension("transport plan does not match the cost matrix".into()));
            }
            ot_loss_for_plan(&cost, plan.clone(), term.sinkhorn.lambda)
        }
        None => ot_loss_with(&cost, &term.sinkhorn)?,
    };
    if alpha != 0.0 {
        for (g, (tr_g, d_g)) in traces.iter().zip(&dists).enumerate() {
            let size = tr_g.len() as f64;
            // M[g][t] = 1 - mean_i t_i[t]
            let g_td: Vec<f64> = ot.grad.row(g).iter().map(|x| -alpha * x / size).collect();
            for (tr, t_d) in tr_g.iter().zip(d_g) {
                let mut g_mu = vec![0.0; tr.mu.len()];
                let mut g_kappa = 0.0;
                deterministic_backward(tr, cap, t_d, &g_td, &mut g_mu, &mut g_kappa);
                model.encoder_backward(tr, &g_mu, g_kappa, grads);
            }
        }
    }
    Ok(ot.loss)
}
