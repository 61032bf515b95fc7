//! Generated corpora for tests, benchmarks and the CLI.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};

use crate::corpus::RawDocument;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ner", "tas", "vu", "zen", "pri", "dal", "sor", "ek", "tum", "ba", "qui", "ro", "fel",
];

/// `n` distinct three-syllable pseudo-words, in draw order.
fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    assert!(n <= SYLLABLES.len().pow(3), "not enough syllable combinations");
    let mut all: Vec<String> = Vec::with_capacity(4096);
    for a in SYLLABLES {
        for b in SYLLABLES {
            for c in SYLLABLES {
                all.push(format!("{a}{b}{c}"));
            }
        }
    }
    all.shuffle(rng);
    all.truncate(n);
    all
}

/// Class-separable corpus: each class draws uniformly from its own
/// vocabulary, and the vocabularies are disjoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub docs_per_class: usize,
    pub words_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            docs_per_class: 100,
            words_per_class: 50,
            min_len: 30,
            max_len: 50,
        }
    }
}

pub fn synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Vec<RawDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = pseudo_words(spec.classes * spec.words_per_class, &mut rng);
    let mut docs = Vec::with_capacity(spec.classes * spec.docs_per_class);
    for c in 0..spec.classes {
        let vocab = &words[c * spec.words_per_class..(c + 1) * spec.words_per_class];
        for _ in 0..spec.docs_per_class {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let text: Vec<&str> = (0..len)
                .map(|_| vocab.choose(&mut rng).expect("nonempty").as_str())
                .collect();
            docs.push((format!("class{c}"), text.join(" ")));
        }
    }
    docs.shuffle(&mut rng);
    docs.into_iter()
        .enumerate()
        .map(|(i, (label, text))| RawDocument {
            id: format!("syn-{i:04}"),
            text,
            label: Some(label),
        })
        .collect()
}

/// Class names and sizes of the four-newsgroup benchmark.
pub const NEWSGROUPS: [(&str, usize); 4] = [("atheism", 689), ("religion", 521), ("graphics", 836), ("space", 856)];

/// Average in-vocabulary document length of the four-newsgroup benchmark.
pub const NEWSGROUPS_MEAN_LEN: f64 = 55.6;

/// A generated stand-in for the four-newsgroup benchmark with its class
/// sizes and mean length. Words come from a shared Zipfian background (65%)
/// or from class vocabularies (35%); the two religion classes share part of
/// theirs. Stop words, numbers and times are mixed in for the filters to
/// remove.
pub fn newsgroups_like(seed: u64) -> Vec<RawDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background_size = 1000;
    let class_size = 250;
    let shared_size = 120;
    let words = pseudo_words(background_size + 4 * class_size, &mut rng);
    let (background, topical) = words.split_at(background_size);
    let zipf = |n: usize, s: f64| WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(s))).expect("weights");
    let bg_dist = zipf(background_size, 1.0);
    let topic_dist = zipf(class_size, 0.8);

    // atheism and religion draw the head of their lists from one pool
    let class_vocab: Vec<Vec<&str>> = (0..4)
        .map(|c| {
            let own = &topical[c * class_size..(c + 1) * class_size];
            if c == 1 {
                let pool = &topical[..shared_size];
                pool.iter().chain(&own[shared_size..]).map(String::as_str).collect()
            } else {
                own.iter().map(String::as_str).collect()
            }
        })
        .collect();

    let fillers = ["the", "and", "of", "to", "in", "is", "that", "it", "for", "was"];
    let mut docs = Vec::new();
    for (c, &(name, count)) in NEWSGROUPS.iter().enumerate() {
        for _ in 0..count {
            // mean of 20 + U{0..=71} is 55.5
            let len = 20 + rng.gen_range(0..=71);
            let mut toks: Vec<String> = Vec::with_capacity(len + len / 3);
            for _ in 0..len {
                let w = if rng.gen::<f64>() < 0.35 {
                    class_vocab[c][topic_dist.sample(&mut rng)]
                } else {
                    background[bg_dist.sample(&mut rng)].as_str()
                };
                toks.push(w.to_string());
                match rng.gen_range(0..12) {
                    0 | 1 => toks.push(fillers.choose(&mut rng).expect("nonempty").to_string()),
                    2 => toks.push(rng.gen_range(1..2000).to_string()),
                    3 => toks.push(format!("{}:{:02}", rng.gen_range(1..13), rng.gen_range(0..60))),
                    _ => {}
                }
            }
            docs.push((name.to_string(), toks.join(" ")));
        }
    }
    docs.shuffle(&mut rng);
    docs.into_iter()
        .enumerate()
        .map(|(i, (label, text))| RawDocument {
            id: format!("ng-{i:05}"),
            text,
            label: Some(label),
        })
        .collect()
}
