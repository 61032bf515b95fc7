//! Unit-norm word embeddings trained on the corpus itself.
//!
//! Skip-gram with negative sampling, where each input vector is projected
//! back onto the unit sphere after every update. Training is single-threaded
//! and fully determined by the seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};

/// `|V| x d` matrix whose rows are unit vectors, row `i` belonging to
/// vocabulary index `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    vectors: Array2<f64>,
}

impl EmbeddingMatrix {
    /// Normalizes every row. Zero rows are rejected.
    pub fn from_rows(mut vectors: Array2<f64>) -> Result<Self> {
        for (i, mut row) in vectors.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "embedding row {i} has zero or non-finite norm"
                )));
            }
            row /= n;
        }
        Ok(EmbeddingMatrix { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.vectors
    }

    /// Cosine of rows `i` and `j`, clamped to [-1, 1].
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        self.vectors.row(i).dot(&self.vectors.row(j)).clamp(-1.0, 1.0)
    }

    /// Text format: a `dim |V|` header, then one `token v_1 ... v_d` line per
    /// word in vocabulary order.
    pub fn to_text(&self, vocab: &Vocabulary) -> Result<String> {
        if vocab.len() != self.len() {
            return Err(Error::Dimension(format!(
                "vocabulary has {} tokens, matrix has {} rows",
                vocab.len(),
                self.len()
            )));
        }
        let mut out = format!("{} {}\n", self.dim(), self.len());
        for (tok, row) in vocab.tokens().iter().zip(self.vectors.rows()) {
            out.push_str(tok);
            for x in row {
                write!(out, " {x}").expect("writing to a String");
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses the text format, returning tokens in file order.
    pub fn from_text(text: &str) -> Result<(Vec<String>, EmbeddingMatrix)> {
        let parse_err = |message: String| Error::Parse {
            context: "embedding file".into(),
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err("missing header".into()))?;
        let mut it = header.split_whitespace();
        let dim: usize = it
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| parse_err(format!("bad header `{header}`")))?;
        let n: usize = it
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| parse_err(format!("bad header `{header}`")))?;
        let mut tokens = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * dim);
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let tok = parts
                .next()
                .ok_or_else(|| parse_err(format!("empty line {}", lineno + 2)))?;
            let before = data.len();
            for p in parts {
                data.push(
                    p.parse::<f64>()
                        .map_err(|e| parse_err(format!("line {}: {e}", lineno + 2)))?,
                );
            }
            if data.len() - before != dim {
                return Err(parse_err(format!(
                    "line {} has {} values, expected {dim}",
                    lineno + 2,
                    data.len() - before
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() != n {
            return Err(parse_err(format!("header says {n} rows, found {}", tokens.len())));
        }
        let vectors = Array2::from_shape_vec((n, dim), data).map_err(|e| parse_err(e.to_string()))?;
        Ok((tokens, EmbeddingMatrix::from_rows(vectors)?))
    }

    pub fn save(&self, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text(vocab)?).map_err(|e| Error::io(path, e))
    }

    /// Loads a saved matrix and reorders it to `vocab`'s index order.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (tokens, m) = Self::from_text(&text)?;
        let mut rows = Array2::zeros((vocab.len(), m.dim()));
        let mut filled = vec![false; vocab.len()];
        for (i, tok) in tokens.iter().enumerate() {
            if let Some(id) = vocab.id(tok) {
                rows.row_mut(id).assign(&m.row(i));
                filled[id] = true;
            }
        }
        if let Some(id) = filled.iter().position(|f| !f) {
            return Err(Error::InvalidInput(format!(
                "embedding file has no vector for `{}`",
                vocab.token(id).unwrap_or("?")
            )));
        }
        Self::from_rows(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Starting rate; decays linearly to 1e-4 of itself.
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 10,
            learning_rate: 0.025,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedEmbeddings {
    pub matrix: EmbeddingMatrix,
    /// Mean negative-sampling loss per (center, context) pair, per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Cumulative unigram^0.75 distribution for negative draws.
struct NoiseSampler {
    cdf: Vec<f64>,
}

impl NoiseSampler {
    fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        for x in &mut cdf {
            *x /= acc;
        }
        NoiseSampler { cdf }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

pub fn train_word_embeddings(corpus: &Corpus, cfg: &SgnsConfig) -> Result<TrainedEmbeddings> {
    let v = corpus.vocabulary.len();
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot train embeddings on an empty corpus".into()));
    }
    if cfg.dim < 2 {
        return Err(Error::Config("embedding dim must be at least 2".into()));
    }
    if v < cfg.negatives + 1 {
        return Err(Error::Config(format!(
            "vocabulary of {v} words is smaller than negatives + 1 = {}",
            cfg.negatives + 1
        )));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut input = Array2::from_shape_fn((v, d), |_| rng.gen::<f64>() - 0.5);
    for mut row in input.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let mut output = Array2::<f64>::zeros((v, d));
    let noise = NoiseSampler::new(corpus.vocabulary.counts());

    let total_tokens: usize = corpus.documents.iter().map(|doc| doc.tokens.len()).sum();
    let total_work = (total_tokens * cfg.epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut grad_in = vec![0.0; d];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for &di in &order {
            let seq = &corpus.documents[di].tokens;
            for (i, &center) in seq.iter().enumerate() {
                let lr = cfg.learning_rate * (1.0 - processed as f64 / total_work).max(1e-4);
                processed += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(seq.len());
                for (j, &context) in seq.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let n = noise.draw(&mut rng);
                            if n == context {
                                continue;
                            }
                            (n, 0.0)
                        };
                        let score = input.row(center).dot(&output.row(target));
                        loss_sum -= if label == 1.0 {
                            log_sigmoid(score)
                        } else {
                            log_sigmoid(-score)
                        };
                        let g = lr * (label - sigmoid(score));
                        let mut out_row = output.row_mut(target);
                        let in_row = input.row(center);
                        for c in 0..d {
                            grad_in[c] += g * out_row[c];
                            out_row[c] += g * in_row[c];
                        }
                    }
                    let mut row = input.row_mut(center);
                    for c in 0..d {
                        row[c] += grad_in[c];
                    }
                    let n = row.dot(&row).sqrt();
                    row /= n;
                    debug_assert!((row.dot(&row) - 1.0).abs() < 1e-9);
                    pairs += 1;
                }
            }
        }
        let mean = if pairs > 0 { loss_sum / pairs as f64 } else { 0.0 };
        if !mean.is_finite() {
            return Err(Error::Numerical("embedding loss became non-finite".into()));
        }
        epoch_losses.push(mean);
    }
    Ok(TrainedEmbeddings {
        matrix: EmbeddingMatrix { vectors: input },
        epoch_losses,
    })
}

/// Top-`k` rows by cosine with `word_index`, excluding itself, descending
/// (lower index first on ties).
pub fn nearest_neighbors(matrix: &EmbeddingMatrix, word_index: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let n = matrix.len();
    if word_index >= n {
        return Err(Error::InvalidInput(format!(
            "word index {word_index} out of range for {n} rows"
        )));
    }
    if k >= n {
        return Err(Error::InvalidInput(format!(
            "k = {k} must be below the vocabulary size {n}"
        )));
    }
    let mut scored: Vec<(usize, f64)> = (0..n)
        .filter(|&j| j != word_index)
        .map(|j| (j, matrix.cosine(word_index, j)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FilterRules, RawDocument};
    use ndarray::array;

    fn two_cluster_corpus() -> Corpus {
        let a = ["apple", "banana", "cherry", "grape", "lemon", "mango"];
        let b = ["rocket", "orbit", "planet", "comet", "galaxy", "nebula"];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raws: Vec<RawDocument> = (0..120)
            .map(|i| {
                let words = if i % 2 == 0 { &a } else { &b };
                let text: Vec<&str> = (0..12).map(|_| *words.choose(&mut rng).unwrap()).collect();
                RawDocument {
                    id: i.to_string(),
                    text: text.join(" "),
                    label: None,
                }
            })
            .collect();
        Corpus::build(&raws, &FilterRules::english(), 1).unwrap()
    }

    #[test]
    fn rows_are_unit_norm() {
        let c = two_cluster_corpus();
        let cfg = SgnsConfig {
            dim: 16,
            epochs: 3,
            rng_seed: 1,
            ..Default::default()
        };
        let out = train_word_embeddings(&c, &cfg).unwrap();
        for row in out.matrix.as_array().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn clusters_separate() {
        let c = two_cluster_corpus();
        let cfg = SgnsConfig {
            dim: 16,
            epochs: 5,
            rng_seed: 4,
            ..Default::default()
        };
        let m = train_word_embeddings(&c, &cfg).unwrap().matrix;
        let fruit: Vec<usize> = ["apple", "banana", "cherry", "grape", "lemon", "mango"]
            .iter()
            .map(|w| c.vocabulary.id(w).unwrap())
            .collect();
        let space: Vec<usize> = (0..c.vocabulary.len()).filter(|i| !fruit.contains(i)).collect();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for group in [&fruit, &space] {
            for (x, &i) in group.iter().enumerate() {
                for &j in &group[x + 1..] {
                    intra.push(m.cosine(i, j));
                }
            }
        }
        for &i in &fruit {
            for &j in &space {
                inter.push(m.cosine(i, j));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&intra) > mean(&inter), "{} vs {}", mean(&intra), mean(&inter));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let c = two_cluster_corpus();
        let cfg = SgnsConfig {
            dim: 2,
            epochs: 1,
            rng_seed: 77,
            ..Default::default()
        };
        let a = train_word_embeddings(&c, &cfg).unwrap().matrix;
        let b = train_word_embeddings(&c, &cfg).unwrap().matrix;
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_vocabulary_is_rejected() {
        let raws = vec![RawDocument {
            id: "0".into(),
            text: "alpha beta alpha".into(),
            label: None,
        }];
        let c = Corpus::build(&raws, &FilterRules::english(), 1).unwrap();
        assert!(train_word_embeddings(&c, &SgnsConfig::default()).is_err());
    }

    #[test]
    fn neighbor_queries() {
        let m = EmbeddingMatrix::from_rows(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let nn = nearest_neighbors(&m, 0, 3).unwrap();
        assert_eq!(nn[0], (1, 1.0));
        assert_eq!(nn[1], (2, 0.0));
        assert_eq!(nn[2], (3, -1.0));
        assert!(nearest_neighbors(&m, 0, 4).is_err());
        assert!(nearest_neighbors(&m, 9, 1).is_err());
    }

    #[test]
    fn text_format_round_trip() {
        let c = two_cluster_corpus();
        let cfg = SgnsConfig {
            dim: 5,
            epochs: 1,
            ..Default::default()
        };
        let m = train_word_embeddings(&c, &cfg).unwrap().matrix;
        let text = m.to_text(&c.vocabulary).unwrap();
        assert!(text.starts_with(&format!("5 {}\n", c.vocabulary.len())));
        let (tokens, back) = EmbeddingMatrix::from_text(&text).unwrap();
        assert_eq!(tokens, c.vocabulary.tokens());
        for (x, y) in m.as_array().iter().zip(back.as_array().iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(EmbeddingMatrix::from_text("3 1\nfoo 1 2\n").is_err());
    }
}
