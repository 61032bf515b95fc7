//! Text ingestion: tokenization, vocabulary construction, bag-of-words
//! vectors and labeled seed sampling.
//!
//! Input corpora are JSON lines, one object per document:
//!
//! ```text
//! {"id": "doc-17", "text": "Orbital launch slipped again", "label": "space"}
//! ```
//!
//! `label` is optional. Documents without a label take part in training but
//! never in seeding or evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

/// Documents with fewer in-vocabulary tokens than this are dropped.
pub const MIN_DOC_TOKENS: u32 = 2;

static TIME_LIKE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\d{1,2}(:\d{2}){1,2}([ap]\.?m\.?)?$|^\d{1,2}([ap]\.?m\.?)$").unwrap());

/// Stop list plus the fixed digit/time/symbol filters.
#[derive(Debug, Clone)]
pub struct FilterRules {
    stopwords: HashSet<String>,
}

impl FilterRules {
    /// The bundled English stop list (`data/stopwords_en.txt`).
    pub fn english() -> Self {
        Self::from_list(DEFAULT_STOPWORDS)
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        FilterRules {
            stopwords: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// Stop list file: one word per line, `#` starts a comment line.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_list(&text))
    }

    fn from_list(text: &str) -> Self {
        Self::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    pub fn len(&self) -> usize {
        self.stopwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stopwords.is_empty()
    }
}

impl Default for FilterRules {
    fn default() -> Self {
        Self::english()
    }
}

/// Lowercases, splits on non-alphanumeric boundaries and removes stop words,
/// digit strings, time-like strings and symbol-only strings.
pub fn tokenize_and_filter(raw_text: &str, rules: &FilterRules) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in raw_text.split_whitespace() {
        let lowered = chunk.to_lowercase();
        let trimmed = lowered.trim_matches(|c: char| !c.is_alphanumeric());
        if trimmed.is_empty() || TIME_LIKE.is_match(trimmed) {
            continue;
        }
        for piece in trimmed.split(|c: char| !c.is_alphanumeric()) {
            if piece.is_empty() || piece.chars().all(|c| c.is_ascii_digit()) || rules.is_stopword(piece) {
                continue;
            }
            out.push(piece.to_string());
        }
    }
    out
}

/// Token to index map. Indices follow descending corpus frequency, ties
/// broken lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_parts(r.tokens, r.counts)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.id_to_token,
            counts: v.counts,
        }
    }
}

impl Vocabulary {
    pub(crate) fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

pub fn build_vocabulary<S: AsRef<str>>(token_docs: &[Vec<S>], min_count: u64) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for doc in token_docs {
        for tok in doc {
            *freq.entry(tok.as_ref()).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no token reaches min_count = {min_count}; vocabulary would be empty"
        )));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let (tokens, counts) = kept.into_iter().map(|(t, c)| (t.to_string(), c)).unzip();
    Ok(Vocabulary::from_parts(tokens, counts))
}

/// Sparse count vector for one document. `counts` is sorted by index;
/// `tokens` keeps the in-vocabulary ids in reading order for the
/// embedding trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowDocument {
    pub doc_id: String,
    pub counts: Vec<(usize, u32)>,
    pub label: Option<String>,
    #[serde(default)]
    pub tokens: Vec<usize>,
}

impl BowDocument {
    pub fn total(&self) -> u32 {
        self.counts.iter().map(|&(_, c)| c).sum()
    }

    /// Counts normalized to relative frequencies.
    pub fn frequencies(&self) -> Vec<(usize, f64)> {
        let total = f64::from(self.total());
        self.counts.iter().map(|&(i, c)| (i, f64::from(c) / total)).collect()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.doc_id = id.into();
        self
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }
}

/// Counts in-vocabulary tokens. Returns `None` (dropped) when fewer than
/// [`MIN_DOC_TOKENS`] tokens are in the vocabulary.
pub fn vectorize<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Option<BowDocument> {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    let mut sequence = Vec::new();
    for tok in tokens {
        if let Some(id) = vocab.id(tok.as_ref()) {
            *counts.entry(id).or_insert(0) += 1;
            sequence.push(id);
        }
    }
    let total: u32 = counts.values().sum();
    if total < MIN_DOC_TOKENS {
        return None;
    }
    Some(BowDocument {
        doc_id: String::new(),
        counts: counts.into_iter().collect(),
        label: None,
        tokens: sequence,
    })
}

/// One line of the input corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

pub fn parse_jsonl(text: &str) -> Result<Vec<RawDocument>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("corpus line {}", n + 1), e)))
        .collect()
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<RawDocument>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn write_jsonl(path: impl AsRef<Path>, docs: &[RawDocument]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).map_err(|e| Error::json("corpus", e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<BowDocument>,
    pub vocabulary: Vocabulary,
}

impl Corpus {
    /// Tokenizes, builds the vocabulary and vectorizes, dropping short
    /// documents. Input order is preserved.
    pub fn build(raw: &[RawDocument], rules: &FilterRules, min_count: u64) -> Result<Corpus> {
        let token_docs: Vec<Vec<String>> = raw.iter().map(|d| tokenize_and_filter(&d.text, rules)).collect();
        let vocabulary = build_vocabulary(&token_docs, min_count)?;
        let documents = Self::vectorize_all(raw, &token_docs, &vocabulary);
        if documents.is_empty() {
            return Err(Error::Config(
                "every document was dropped below the two-token floor".into(),
            ));
        }
        Ok(Corpus { documents, vocabulary })
    }

    /// Vectorizes new text against a fixed vocabulary.
    pub fn with_vocabulary(raw: &[RawDocument], rules: &FilterRules, vocabulary: Vocabulary) -> Corpus {
        let token_docs: Vec<Vec<String>> = raw.iter().map(|d| tokenize_and_filter(&d.text, rules)).collect();
        let documents = Self::vectorize_all(raw, &token_docs, &vocabulary);
        Corpus { documents, vocabulary }
    }

    fn vectorize_all(raw: &[RawDocument], token_docs: &[Vec<String>], vocab: &Vocabulary) -> Vec<BowDocument> {
        raw.iter()
            .zip(token_docs)
            .filter_map(|(d, toks)| vectorize(toks, vocab).map(|b| b.with_id(d.id.clone()).with_label(d.label.clone())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Distinct labels, sorted.
    pub fn classes(&self) -> Vec<String> {
        self.documents
            .iter()
            .filter_map(|d| d.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.doc_id == doc_id)
    }
}

/// Labeled seed documents, grouped by class. Group order is the sorted
/// label order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSeeds {
    pub groups: BTreeMap<String, Vec<usize>>,
    pub k_per_group: usize,
}

impl LabeledSeeds {
    pub fn new(groups: BTreeMap<String, Vec<usize>>) -> Result<Self> {
        let k = groups.values().next().map(Vec::len).unwrap_or(0);
        if groups.is_empty() || k == 0 {
            return Err(Error::InvalidInput("seed groups must be nonempty".into()));
        }
        if let Some((g, _)) = groups.iter().find(|(_, v)| v.len() != k) {
            return Err(Error::InvalidInput(format!(
                "seed group `{g}` does not have {k} documents like the others"
            )));
        }
        let mut seen = HashSet::new();
        for (g, docs) in &groups {
            for &d in docs {
                if !seen.insert(d) {
                    return Err(Error::InvalidInput(format!(
                        "document {d} appears twice among seeds (group `{g}`)"
                    )));
                }
            }
        }
        Ok(LabeledSeeds { groups, k_per_group: k })
    }

    /// Resolves a `{group: [doc_id, ...]}` JSON object against a corpus.
    pub fn from_json(text: &str, corpus: &Corpus) -> Result<Self> {
        let named: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| Error::json("seeds file", e))?;
        let ids: HashMap<&str, usize> = corpus
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.as_str(), i))
            .collect();
        let mut groups = BTreeMap::new();
        for (g, docs) in named {
            let idx = docs
                .iter()
                .map(|id| {
                    ids.get(id.as_str()).copied().ok_or_else(|| {
                        Error::InvalidInput(format!("seed `{id}` is not in the corpus (or was dropped)"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            groups.insert(g, idx);
        }
        Self::new(groups)
    }

    pub fn to_json(&self, corpus: &Corpus) -> Result<String> {
        let named: BTreeMap<&String, Vec<&str>> = self
            .groups
            .iter()
            .map(|(g, v)| (g, v.iter().map(|&i| corpus.documents[i].doc_id.as_str()).collect()))
            .collect();
        serde_json::to_string_pretty(&named).map_err(|e| Error::json("seeds file", e))
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.keys().map(String::as_str).collect()
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.groups.keys().position(|g| g == label)
    }

    /// Seeds flattened in group order, paired with their group index. This
    /// is the column order of the similarity matrix.
    pub fn flattened(&self) -> Vec<(usize, usize)> {
        self.groups
            .values()
            .enumerate()
            .flat_map(|(g, docs)| docs.iter().map(move |&d| (g, d)))
            .collect()
    }

    pub fn seed_set(&self) -> HashSet<usize> {
        self.groups.values().flatten().copied().collect()
    }

    /// Labeled, non-seed documents whose label is one of the groups, paired
    /// with the gold group index.
    pub fn eval_set(&self, corpus: &Corpus) -> Vec<(usize, usize)> {
        let seeds = self.seed_set();
        corpus
            .documents
            .iter()
            .enumerate()
            .filter(|(i, _)| !seeds.contains(i))
            .filter_map(|(i, d)| d.label.as_deref().and_then(|l| self.group_index(l)).map(|g| (i, g)))
            .collect()
    }
}

/// Draws `k` documents per class. Classes are visited in sorted order with
/// one generator, so the draw depends only on the corpus and `rng_seed`.
pub fn sample_seeds(corpus: &Corpus, k: usize, rng_seed: u64) -> Result<LabeledSeeds> {
    if k == 0 {
        return Err(Error::Config("seed_k must be at least 1".into()));
    }
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, d) in corpus.documents.iter().enumerate() {
        if let Some(l) = &d.label {
            by_class.entry(l.clone()).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(Error::InvalidInput("corpus has no labeled documents".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut groups = BTreeMap::new();
    for (class, mut docs) in by_class {
        if docs.len() < k {
            return Err(Error::InsufficientClass {
                class,
                available: docs.len(),
                requested: k,
            });
        }
        docs.shuffle(&mut rng);
        let mut chosen = docs[..k].to_vec();
        chosen.sort_unstable();
        groups.insert(class, chosen);
    }
    LabeledSeeds::new(groups)
}
