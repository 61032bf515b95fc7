//! The neural topic model.
//!
//! The encoder maps a normalized bag of words to vMF parameters `(mu, kappa)`
//! over a `|T|`-dimensional latent sphere. A topic distribution is the
//! softmax of a latent point, and the decoder mixes the rows of
//! `B = softmax(e_T e_W^T)` with it. All gradients are written out by hand.

mod kd;
mod objective;
mod params;

pub use kd::{
    group_maxima, kd_doc_loss, kd_loss, kd_targets, teacher_distribution, Alignment, KdTarget, SimilarityMatrix,
};
pub use objective::{batch_objective, BatchItem, KdTerm, LossBreakdown, Objective, OtTerm};
pub use params::ModelParams;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BowDocument, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::vmf::{self, VmfNoise, VmfParams, KAPPA_MAX, KAPPA_MIN};

/// Log floor used by every loss.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_topics: usize,
    pub hidden: [usize; 2],
    pub dropout: f64,
    /// Upper bound on the concentration used to scale `mu` in
    /// deterministic topic distributions.
    pub kappa_cap: f64,
}

impl ModelConfig {
    pub fn new(num_topics: usize) -> Self {
        ModelConfig {
            num_topics,
            hidden: [256, 64],
            dropout: 0.5,
            kappa_cap: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(Error::Config("num_topics must be at least 2".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.kappa_cap > 0.0 && self.kappa_cap.is_finite()) {
            return Err(Error::Config("kappa_cap must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Inverted-dropout scale factors (0 or `1/(1-p)`) for the two hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

impl DropoutMasks {
    pub fn draw<R: Rng + ?Sized>(hidden: [usize; 2], rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let mut layer = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let h1 = layer(hidden[0]);
        let h2 = layer(hidden[1]);
        DropoutMasks { h1, h2 }
    }
}

pub enum Mode<'a> {
    /// Dropout on, masks drawn from the generator.
    Train(&'a mut dyn RngCore),
    Eval,
}

/// How a document becomes a topic distribution.
pub enum TopicMode<'a> {
    /// `softmax(z)` for a reparameterized draw `z ~ vMF(mu, kappa)`.
    Sampled(&'a mut dyn RngCore),
    /// `softmax(min(kappa, cap) * mu)`.
    Deterministic,
}

/// Intermediate values of one encoder pass.
#[derive(Debug, Clone)]
pub(crate) struct EncoderTrace {
    input: Vec<(usize, f64)>,
    a1: Array1<f64>,
    h1: Array1<f64>,
    a2: Array1<f64>,
    h2: Array1<f64>,
    masks: Option<DropoutMasks>,
    m_norm: f64,
    k_raw: f64,
    pub(crate) mu: Vec<f64>,
    pub(crate) kappa: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Pulls a gradient on `softmax(x)` back to `x`.
pub(crate) fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// `softmax(min(kappa, cap) * mu)`.
pub fn deterministic_topics(mu: &[f64], kappa: f64, cap: f64) -> Vec<f64> {
    let scale = kappa.min(cap);
    softmax(&mu.iter().map(|x| x * scale).collect::<Vec<_>>())
}

/// `B = rowwise-softmax(e_T e_W^T)`, `|T| x |V|`.
pub fn topic_word_matrix(topic_embedding: &Array2<f64>, word_embedding: &EmbeddingMatrix) -> Result<Array2<f64>> {
    if topic_embedding.ncols() != word_embedding.dim() {
        return Err(Error::Dimension(format!(
            "topic embedding dim {} vs word embedding dim {}",
            topic_embedding.ncols(),
            word_embedding.dim()
        )));
    }
    let mut b = topic_embedding.dot(&word_embedding.as_array().t());
    for mut row in b.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(b)
}

/// `t_d B`, a distribution over the vocabulary.
pub fn decode(t_d: &[f64], topic_embedding: &Array2<f64>, word_embedding: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if t_d.len() != topic_embedding.nrows() {
        return Err(Error::Dimension(format!(
            "topic distribution of length {} for {} topics",
            t_d.len(),
            topic_embedding.nrows()
        )));
    }
    let b = topic_word_matrix(topic_embedding, word_embedding)?;
    Ok(ArrayView1::from(t_d).dot(&b).to_vec())
}

/// `-sum_w x_w log(p_w + eps)` over raw counts.
pub fn reconstruction_loss(doc: &BowDocument, word_dist: &[f64]) -> Result<f64> {
    let mut loss = 0.0;
    for &(w, c) in &doc.counts {
        let p = word_dist.get(w).ok_or_else(|| {
            Error::Dimension(format!("word {w} outside a distribution of length {}", word_dist.len()))
        })?;
        loss -= c as f64 * (p + LOG_EPS).ln();
    }
    Ok(loss)
}

/// Batch mean of the KL divergence of each posterior from the uniform prior.
pub fn kl_loss(kappas: &[f64], num_topics: usize) -> Result<f64> {
    if kappas.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut s = 0.0;
    for &k in kappas {
        s += vmf::kl_to_uniform(k, num_topics)?;
    }
    Ok(s / kappas.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    word_embedding: EmbeddingMatrix,
}

impl TopicModel {
    pub fn new(config: ModelConfig, word_embedding: EmbeddingMatrix, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let params = ModelParams::init(
            word_embedding.len(),
            config.hidden,
            config.num_topics,
            word_embedding.dim(),
            &mut rng,
        );
        Ok(TopicModel {
            config,
            params,
            word_embedding,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams, word_embedding: EmbeddingMatrix) -> Result<Self> {
        config.validate()?;
        let [h1, h2] = config.hidden;
        let (v, t, d) = (word_embedding.len(), config.num_topics, word_embedding.dim());
        let p = &params;
        let ok = p.w1.dim() == (v, h1)
            && p.b1.len() == h1
            && p.w2.dim() == (h1, h2)
            && p.b2.len() == h2
            && p.w_mu.dim() == (h2, t)
            && p.b_mu.len() == t
            && p.w_kappa.len() == h2
            && p.b_kappa.len() == 1
            && p.topic_embedding.dim() == (t, d);
        if !ok {
            return Err(Error::Dimension(
                "parameter shapes do not match the configuration".into(),
            ));
        }
        Ok(TopicModel {
            config,
            params,
            word_embedding,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.word_embedding.len()
    }

    pub fn num_topics(&self) -> usize {
        self.config.num_topics
    }

    pub fn word_embedding(&self) -> &EmbeddingMatrix {
        &self.word_embedding
    }

    pub fn encode(&self, doc: &BowDocument, mode: Mode<'_>) -> Result<VmfParams> {
        let masks = match mode {
            Mode::Train(rng) => Some(DropoutMasks::draw(self.config.hidden, self.config.dropout, rng)),
            Mode::Eval => None,
        };
        let trace = self.encode_trace(doc, masks)?;
        VmfParams::new(trace.mu, trace.kappa)
    }

    pub(crate) fn encode_trace(&self, doc: &BowDocument, masks: Option<DropoutMasks>) -> Result<EncoderTrace> {
        let total = doc.total();
        if total == 0 {
            return Err(Error::InvalidInput(format!(
                "document `{}` has no in-vocabulary words",
                doc.doc_id
            )));
        }
        let p = &self.params;
        let input = doc.frequencies();
        let mut a1 = p.b1.clone();
        for &(w, x) in &input {
            if w >= p.w1.nrows() {
                return Err(Error::Dimension(format!(
                    "word index {w} outside vocabulary of {}",
                    p.w1.nrows()
                )));
            }
            a1.scaled_add(x, &p.w1.row(w));
        }
        let mut h1 = a1.mapv(|x| x.max(0.0));
        if let Some(m) = &masks {
            h1 *= &ArrayView1::from(&m.h1[..]);
        }
        let a2 = h1.dot(&p.w2) + &p.b2;
        let mut h2 = a2.mapv(|x| x.max(0.0));
        if let Some(m) = &masks {
            h2 *= &ArrayView1::from(&m.h2[..]);
        }
        let m = h2.dot(&p.w_mu) + &p.b_mu;
        let m_norm = m.dot(&m).sqrt();
        if !(m_norm > 0.0 && m_norm.is_finite()) {
            return Err(Error::Numerical("encoder produced a degenerate direction".into()));
        }
        let mu = (m / m_norm).to_vec();
        let k_raw = h2.dot(&p.w_kappa) + p.b_kappa[0];
        let kappa = softplus(k_raw).clamp(KAPPA_MIN, KAPPA_MAX);
        if !kappa.is_finite() {
            return Err(Error::Numerical("encoder produced a non-finite concentration".into()));
        }
        Ok(EncoderTrace {
            input,
            a1,
            h1,
            a2,
            h2,
            masks,
            m_norm,
            k_raw,
            mu,
            kappa,
        })
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradients with respect to the unit `mu` and to `kappa` are given.
    pub(crate) fn encoder_backward(&self, trace: &EncoderTrace, g_mu: &[f64], g_kappa: f64, grads: &mut ModelParams) {
        let p = &self.params;
        let mu = ArrayView1::from(&trace.mu[..]);
        let g_mu = ArrayView1::from(g_mu);
        let radial = mu.dot(&g_mu);
        let g_m = (&g_mu - &(&mu * radial)) / trace.m_norm;
        let sp = softplus(trace.k_raw);
        let g_kraw = if sp > KAPPA_MIN && sp < KAPPA_MAX {
            g_kappa * sigmoid(trace.k_raw)
        } else {
            0.0
        };

        let h2 = trace.h2.view().insert_axis(Axis(1));
        grads.w_mu += &h2.dot(&g_m.view().insert_axis(Axis(0)));
        grads.b_mu += &g_m;
        grads.w_kappa.scaled_add(g_kraw, &trace.h2);
        grads.b_kappa[0] += g_kraw;

        let mut g_a2 = p.w_mu.dot(&g_m);
        g_a2.scaled_add(g_kraw, &p.w_kappa);
        if let Some(m) = &trace.masks {
            g_a2 *= &ArrayView1::from(&m.h2[..]);
        }
        g_a2.zip_mut_with(&trace.a2, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let h1 = trace.h1.view().insert_axis(Axis(1));
        grads.w2 += &h1.dot(&g_a2.view().insert_axis(Axis(0)));
        grads.b2 += &g_a2;

        let mut g_a1 = p.w2.dot(&g_a2);
        if let Some(m) = &trace.masks {
            g_a1 *= &ArrayView1::from(&m.h1[..]);
        }
        g_a1.zip_mut_with(&trace.a1, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        for &(w, x) in &trace.input {
            grads.w1.row_mut(w).scaled_add(x, &g_a1);
        }
        grads.b1 += &g_a1;
    }

    pub fn topic_distribution(&self, doc: &BowDocument, mode: TopicMode<'_>) -> Result<Vec<f64>> {
        let trace = self.encode_trace(doc, None)?;
        match mode {
            TopicMode::Deterministic => Ok(deterministic_topics(&trace.mu, trace.kappa, self.config.kappa_cap)),
            TopicMode::Sampled(rng) => {
                let params = VmfParams::new(trace.mu, trace.kappa)?;
                let noise = VmfNoise::draw(self.num_topics(), rng);
                let s = vmf::sample_reparameterized(&params, &noise)?;
                Ok(softmax(&s.z))
            }
        }
    }

    pub fn topic_word_matrix(&self) -> Result<Array2<f64>> {
        topic_word_matrix(&self.params.topic_embedding, &self.word_embedding)
    }

    pub fn decode(&self, t_d: &[f64]) -> Result<Vec<f64>> {
        decode(t_d, &self.params.topic_embedding, &self.word_embedding)
    }

    /// Eval-mode `(mu, kappa)` for every document, `mu` stacked as rows.
    pub fn encode_all(&self, docs: &[&BowDocument]) -> Result<(Array2<f64>, Vec<f64>)> {
        let mut mus = Array2::zeros((docs.len(), self.num_topics()));
        let mut kappas = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let tr = self.encode_trace(doc, None)?;
            mus.row_mut(i).assign(&ArrayView1::from(&tr.mu[..]));
            kappas.push(tr.kappa);
        }
        Ok((mus, kappas))
    }

    /// The `n` most probable words of `topic`, descending (lower index first
    /// on ties).
    pub fn top_words(&self, vocab: &Vocabulary, topic: usize, n: usize) -> Result<Vec<(String, f64)>> {
        if topic >= self.num_topics() {
            return Err(Error::InvalidInput(format!("topic {topic} out of range")));
        }
        if vocab.len() != self.vocab_size() {
            return Err(Error::Dimension("vocabulary does not match the model".into()));
        }
        if n > vocab.len() {
            return Err(Error::InvalidInput(format!(
                "n = {n} exceeds the vocabulary size {}",
                vocab.len()
            )));
        }
        let b = self.topic_word_matrix()?;
        let row = b.row(topic);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &c| row[c].total_cmp(&row[a]).then(a.cmp(&c)));
        Ok(idx
            .into_iter()
            .take(n)
            .map(|i| (vocab.token(i).unwrap_or_default().to_string(), row[i]))
            .collect())
    }
}
