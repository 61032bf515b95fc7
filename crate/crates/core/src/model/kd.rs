//! Seed similarities, the similarity teacher, and the distillation loss.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{deterministic_topics, TopicModel, LOG_EPS};
use crate::corpus::BowDocument;
use crate::error::{Error, Result};
use crate::sinkhorn::TransportPlan;

/// Cosine similarities between document directions (rows) and seed
/// directions (columns). Built once and frozen before any distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    s: Array2<f64>,
    /// Corpus index of each row.
    row_docs: Vec<usize>,
    /// Group index of each column.
    column_groups: Vec<usize>,
    num_groups: usize,
    frozen: bool,
    #[serde(skip)]
    row_of: HashMap<usize, usize>,
}

impl SimilarityMatrix {
    /// `s[d][i] = mu_d . mu_i`, clamped to [-1, 1]. Rows of both inputs must
    /// be unit vectors.
    pub fn compute(
        doc_mus: ArrayView2<'_, f64>,
        row_docs: Vec<usize>,
        seed_mus: ArrayView2<'_, f64>,
        column_groups: Vec<usize>,
    ) -> Result<Self> {
        if doc_mus.ncols() != seed_mus.ncols() {
            return Err(Error::Dimension(format!(
                "document directions have dim {}, seeds {}",
                doc_mus.ncols(),
                seed_mus.ncols()
            )));
        }
        if row_docs.len() != doc_mus.nrows() || column_groups.len() != seed_mus.nrows() {
            return Err(Error::Dimension("row or column labels do not match the inputs".into()));
        }
        for row in doc_mus.rows().into_iter().chain(seed_mus.rows()) {
            if (row.dot(&row) - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidInput("similarity inputs must be unit vectors".into()));
            }
        }
        let num_groups = column_groups.iter().max().map_or(0, |g| g + 1);
        if (0..num_groups).any(|g| !column_groups.contains(&g)) {
            return Err(Error::InvalidInput("every group needs at least one seed column".into()));
        }
        let s = doc_mus.dot(&seed_mus.t()).mapv(|x| x.clamp(-1.0, 1.0));
        let mut out = SimilarityMatrix {
            s,
            row_docs,
            column_groups,
            num_groups,
            frozen: false,
            row_of: HashMap::new(),
        };
        out.reindex();
        Ok(out)
    }

    fn reindex(&mut self) {
        self.row_of = self.row_docs.iter().enumerate().map(|(r, &d)| (d, r)).collect();
    }

    /// Restores the row lookup after deserialization.
    pub fn rebuild_index(mut self) -> Self {
        self.reindex();
        self
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn row_docs(&self) -> &[usize] {
        &self.row_docs
    }

    pub fn column_groups(&self) -> &[usize] {
        &self.column_groups
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn row_for_doc(&self, doc: usize) -> Option<usize> {
        self.row_of.get(&doc).copied()
    }

    /// Per-group maximum similarity of row `r`.
    pub fn group_maxima(&self, r: usize) -> Vec<f64> {
        group_maxima(
            self.s.row(r).as_slice().expect("row-major"),
            &self.column_groups,
            self.num_groups,
        )
    }

    /// Stable bytes for equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("similarity matrix serializes")
    }
}

pub fn group_maxima(s_row: &[f64], column_groups: &[usize], num_groups: usize) -> Vec<f64> {
    let mut best = vec![f64::NEG_INFINITY; num_groups];
    for (&s, &g) in s_row.iter().zip(column_groups) {
        best[g] = best[g].max(s);
    }
    best
}

/// `softmax(maxima / tau)` over groups.
pub fn teacher_distribution(maxima: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    Ok(super::softmax(&maxima.iter().map(|s| s / tau).collect::<Vec<_>>()))
}

/// Group `g` is represented by topic `group_topic[g]`; no topic serves two
/// groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    group_topic: Vec<usize>,
    num_topics: usize,
}

impl Alignment {
    pub fn new(group_topic: Vec<usize>, num_topics: usize) -> Result<Self> {
        if group_topic.is_empty() {
            return Err(Error::InvalidInput("alignment needs at least one group".into()));
        }
        let mut used = vec![false; num_topics];
        for (g, &t) in group_topic.iter().enumerate() {
            if t >= num_topics {
                return Err(Error::InvalidInput(format!("group {g} aligned to missing topic {t}")));
            }
            if used[t] {
                return Err(Error::Contract(format!("topic {t} is aligned to more than one group")));
            }
            used[t] = true;
        }
        Ok(Alignment {
            group_topic,
            num_topics,
        })
    }

    pub fn identity(n: usize) -> Self {
        Alignment {
            group_topic: (0..n).collect(),
            num_topics: n,
        }
    }

    /// Each group takes the topic holding most of its transport mass.
    pub fn from_plan(plan: &TransportPlan) -> Result<Self> {
        Self::new(plan.group_argmax(), plan.p.nrows())
    }

    pub fn num_groups(&self) -> usize {
        self.group_topic.len()
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn topic_of(&self, group: usize) -> usize {
        self.group_topic[group]
    }

    pub fn group_topics(&self) -> &[usize] {
        &self.group_topic
    }

    pub fn group_of(&self, topic: usize) -> Option<usize> {
        self.group_topic.iter().position(|&t| t == topic)
    }

    /// `q_g = t_d[topic_of(g)]`, unnormalized.
    pub fn group_mass(&self, t_d: &[f64]) -> Vec<f64> {
        self.group_topic.iter().map(|&t| t_d[t]).collect()
    }
}

/// The distillation target of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTarget {
    pub teacher: Vec<f64>,
    /// Groups whose best similarity reaches the threshold.
    pub active: Vec<bool>,
}

/// Targets for every row of `sim`, keyed by corpus index. Documents with no
/// active group are left out.
pub fn kd_targets(sim: &SimilarityMatrix, tau: f64, thresh: f64) -> Result<HashMap<usize, KdTarget>> {
    if !sim.is_frozen() {
        return Err(Error::Contract(
            "similarity matrix must be frozen before distillation".into(),
        ));
    }
    let mut out = HashMap::new();
    for (r, &doc) in sim.row_docs().iter().enumerate() {
        let maxima = sim.group_maxima(r);
        let active: Vec<bool> = maxima.iter().map(|&s| s >= thresh).collect();
        if active.iter().any(|&a| a) {
            let teacher = teacher_distribution(&maxima, tau)?;
            out.insert(doc, KdTarget { teacher, active });
        }
    }
    Ok(out)
}

/// `-tau^2 sum_g active_g teacher_g log(q_g + eps)` and its gradient in `q`.
pub fn kd_doc_loss(target: &KdTarget, q: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let t2 = tau * tau;
    let mut loss = 0.0;
    let mut grad = vec![0.0; q.len()];
    for g in 0..q.len() {
        if target.active[g] {
            let w = t2 * target.teacher[g];
            loss -= w * (q[g] + LOG_EPS).ln();
            grad[g] = -w / (q[g] + LOG_EPS);
        }
    }
    (loss, grad)
}

/// Mean distillation loss over the documents of `docs` that have at least
/// one active group, using eval-mode deterministic topic distributions.
/// Returns 0 when no document is active.
pub fn kd_loss(
    model: &TopicModel,
    docs: &[(usize, &BowDocument)],
    sim: &SimilarityMatrix,
    alignment: &Alignment,
    tau: f64,
    thresh: f64,
) -> Result<f64> {
    if alignment.num_groups() != sim.num_groups() {
        return Err(Error::Contract(format!(
            "alignment covers {} groups, similarity matrix {}",
            alignment.num_groups(),
            sim.num_groups()
        )));
    }
    if alignment.num_topics() != model.num_topics() {
        return Err(Error::Dimension(
            "alignment and model disagree on the topic count".into(),
        ));
    }
    let targets = kd_targets(sim, tau, thresh)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(idx, doc) in docs {
        if let Some(target) = targets.get(&idx) {
            let tr = model.encode_trace(doc, None)?;
            let t_d = deterministic_topics(&tr.mu, tr.kappa, model.config.kappa_cap);
            sum += kd_doc_loss(target, &alignment.group_mass(&t_d), tau).0;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn similarity_examples() {
        let docs = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let seeds = array![[1.0, 0.0]];
        let s = SimilarityMatrix::compute(docs.view(), vec![4, 5, 6], seeds.view(), vec![0]).unwrap();
        assert_eq!(s.as_array().column(0).to_vec(), vec![1.0, 0.0, -1.0]);
        assert_eq!(s.row_for_doc(5), Some(1));
        assert!(!s.is_frozen());
        assert!(kd_targets(&s, 1.0, 0.0).is_err());
        let bad = array![[2.0, 0.0]];
        assert!(SimilarityMatrix::compute(bad.view(), vec![0], seeds.view(), vec![0]).is_err());
    }

    #[test]
    fn teacher_examples() {
        let u = teacher_distribution(&[0.3, 0.3, 0.3], 1.0).unwrap();
        assert!(u.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let t = teacher_distribution(&[1.0, 0.0], 1.0).unwrap();
        assert!((t[0] - 0.7311).abs() < 1e-4 && (t[1] - 0.2689).abs() < 1e-4);
        let hot = teacher_distribution(&[1.0, -0.5, 0.2], 1e6).unwrap();
        assert!(hot.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-6));
        assert!(teacher_distribution(&[1.0], 0.0).is_err());
    }

    #[test]
    fn group_maxima_by_column() {
        let m = group_maxima(&[0.1, 0.7, -0.2, 0.4], &[0, 0, 1, 1], 2);
        assert_eq!(m, vec![0.7, 0.4]);
    }

    #[test]
    fn alignment_rules() {
        assert!(Alignment::new(vec![0, 0], 3).is_err());
        assert!(Alignment::new(vec![0, 3], 3).is_err());
        let a = Alignment::new(vec![2, 0], 3).unwrap();
        assert_eq!(a.group_of(2), Some(0));
        assert_eq!(a.group_of(1), None);
        assert_eq!(a.group_mass(&[0.1, 0.3, 0.6]), vec![0.6, 0.1]);
    }

    #[test]
    fn kd_doc_loss_examples() {
        let silent = KdTarget {
            teacher: vec![0.5, 0.5],
            active: vec![false, false],
        };
        assert_eq!(kd_doc_loss(&silent, &[0.5, 0.5], 1.0).0, 0.0);
        let hot = KdTarget {
            teacher: vec![1.0, 0.0],
            active: vec![true, true],
        };
        assert!(kd_doc_loss(&hot, &[1.0, 0.0], 1.0).0.abs() < 1e-9);
        let soft = KdTarget {
            teacher: vec![0.3, 0.7],
            active: vec![true, true],
        };
        let q = [0.4, 0.6];
        let l1 = kd_doc_loss(&soft, &q, 1.0).0;
        let l2 = kd_doc_loss(&soft, &q, 2.0).0;
        assert!((l2 - 4.0 * l1).abs() < 1e-12);
        assert!(l1 >= 0.0);
    }
}
