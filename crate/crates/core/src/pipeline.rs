//! End-to-end runs and checkpoints.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{read_jsonl, sample_seeds, Corpus, FilterRules, LabeledSeeds, RawDocument, Vocabulary};
use crate::embedding::{train_word_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate, MetricsReport};
use crate::model::Alignment;
use crate::trainer::{train_stage1, train_stage2, train_stage3, TrainState};

pub const CHECKPOINT_FORMAT: &str = "kdstm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or to evaluate: the configuration,
/// the vocabulary, the seed document ids, and the full training state
/// (model, optimizer moments, stage-1 direction snapshot, seeds, similarity
/// matrix, plan, alignment, telemetry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    /// Seed ids by group, so that other files can exclude them.
    pub seed_ids: Option<BTreeMap<String, Vec<String>>>,
    pub state: TrainState,
}

impl Checkpoint {
    /// `corpus` is the one the state was trained on.
    pub fn new(config: TrainConfig, corpus: &Corpus, state: TrainState) -> Self {
        let seed_ids = state.seeds.as_ref().map(|seeds| {
            seeds
                .groups
                .iter()
                .map(|(g, docs)| {
                    (
                        g.clone(),
                        docs.iter().map(|&i| corpus.documents[i].doc_id.clone()).collect(),
                    )
                })
                .collect()
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            vocabulary: corpus.vocabulary.clone(),
            seed_ids,
            state,
        }
    }

    /// Builds `raw` over the checkpoint's vocabulary.
    pub fn corpus(&self, raw: &[RawDocument]) -> Result<Corpus> {
        Ok(Corpus::with_vocabulary(
            raw,
            &filter_rules(&self.config)?,
            self.vocabulary.clone(),
        ))
    }

    /// Labeled documents of `corpus` whose label is a seed group and whose id
    /// is not a seed, with their gold group.
    pub fn eval_pairs(&self, corpus: &Corpus) -> Result<Vec<(usize, usize)>> {
        let named = self
            .seed_ids
            .as_ref()
            .ok_or_else(|| Error::Contract("checkpoint has no seed groups".into()))?;
        let seeds: HashSet<&str> = named.values().flatten().map(String::as_str).collect();
        Ok(corpus
            .documents
            .iter()
            .enumerate()
            .filter(|(_, d)| !seeds.contains(d.doc_id.as_str()))
            .filter_map(|(i, d)| {
                let label = d.label.as_deref()?;
                named.keys().position(|g| g == label).map(|g| (i, g))
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| Error::json("checkpoint header", e))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                context: "checkpoint".into(),
                message: format!("unknown format `{}`", header.format),
            });
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                context: "checkpoint".into(),
                message: format!("unsupported version {}", header.version),
            });
        }
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::json("checkpoint", e))?;
        ck.state.similarity = ck.state.similarity.map(|s| s.rebuild_index());
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn filter_rules(config: &TrainConfig) -> Result<FilterRules> {
    match &config.stopword_file {
        Some(path) => FilterRules::from_file(path),
        None => Ok(FilterRules::english()),
    }
}

pub fn build_corpus(raw: &[RawDocument], config: &TrainConfig) -> Result<Corpus> {
    Corpus::build(raw, &filter_rules(config)?, config.min_count)
}

/// Reads and builds the corpus named by `corpus_path`.
pub fn load_corpus(config: &TrainConfig) -> Result<Corpus> {
    let path = config
        .corpus_path
        .as_ref()
        .ok_or_else(|| Error::Config("corpus_path is not set".into()))?;
    build_corpus(&read_jsonl(path)?, config)
}

/// Seeds from `seeds_path` when set, otherwise `seed_k` sampled per class
/// with `rng_seed`.
pub fn resolve_seeds(corpus: &Corpus, config: &TrainConfig) -> Result<LabeledSeeds> {
    match &config.seeds_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            LabeledSeeds::from_json(&text, corpus)
        }
        None => sample_seeds(corpus, config.seed_k, config.rng_seed),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub state: TrainState,
    /// Metrics with the alignment of the final stage-2 plan, before
    /// distillation.
    pub stage2: MetricsReport,
    pub report: MetricsReport,
}

/// Wall time per stage in milliseconds, keyed `embed`, `stage1`, `stage2`,
/// `stage3`. `embed` is left out when the embeddings were not trained here.
pub fn stage_timings(embed_ms: Option<f64>, state: &TrainState) -> BTreeMap<String, f64> {
    let mut t = BTreeMap::new();
    if let Some(ms) = embed_ms {
        t.insert("embed".to_string(), ms);
    }
    for (i, ms) in state.stage_wall_ms.iter().enumerate() {
        t.insert(format!("stage{}", i + 1), *ms);
    }
    t
}

/// Word embeddings trained on the corpus, or read from `path` when given,
/// with the training time in milliseconds (`None` when read).
pub fn word_embeddings(
    corpus: &Corpus,
    config: &TrainConfig,
    path: Option<&Path>,
) -> Result<(EmbeddingMatrix, Option<f64>)> {
    match path {
        Some(p) => Ok((EmbeddingMatrix::load(p, &corpus.vocabulary)?, None)),
        None => {
            let start = Instant::now();
            let trained = train_word_embeddings(corpus, &config.sgns())?;
            Ok((trained.matrix, Some(start.elapsed().as_secs_f64() * 1e3)))
        }
    }
}

/// A fresh state sized for `num_groups`, trained through stage 1.
pub fn pretrain(
    corpus: &Corpus,
    embeddings: EmbeddingMatrix,
    config: &TrainConfig,
    num_groups: usize,
) -> Result<TrainState> {
    config.validate()?;
    let mut state = TrainState::new(corpus, embeddings, config, num_groups)?;
    train_stage1(&mut state, corpus, config)?;
    Ok(state)
}

/// Stages 2 and 3 from a stage-1 state. Returns the metrics at the end of
/// stage 2 (aligned by its final plan) and at the end of stage 3. Timings
/// are filled in by the caller.
pub fn finetune(
    state: &mut TrainState,
    corpus: &Corpus,
    seeds: LabeledSeeds,
    config: &TrainConfig,
) -> Result<(MetricsReport, MetricsReport)> {
    train_stage2(state, corpus, seeds.clone(), config)?;
    let plan = state
        .plan
        .as_ref()
        .ok_or_else(|| Error::Contract("stage 2 left no plan".into()))?;
    let stage2 = evaluate(&state.model, &Alignment::from_plan(plan)?, corpus, &seeds)?;
    train_stage3(state, corpus, config)?;
    let alignment = state.alignment.as_ref().expect("stage 3 sets the alignment");
    let report = evaluate(&state.model, alignment, corpus, &seeds)?;
    Ok((stage2, report))
}

/// Embeddings, the three stages, and evaluation on the labeled non-seed
/// documents.
pub fn run_pipeline(corpus: &Corpus, seeds: LabeledSeeds, config: &TrainConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let (embeddings, embed_ms) = word_embeddings(corpus, config, None)?;
    let mut state = pretrain(corpus, embeddings, config, seeds.num_groups())?;
    let (mut stage2, mut report) = finetune(&mut state, corpus, seeds, config)?;
    stage2.wall_ms_per_stage = stage_timings(embed_ms, &state);
    report.wall_ms_per_stage = stage_timings(embed_ms, &state);
    Ok(PipelineOutput { state, stage2, report })
}

/// Reads the corpus at `corpus_path`, resolves seeds, trains, and returns
/// the checkpoint and final metrics.
pub fn full_pipeline(config: &TrainConfig) -> Result<(Checkpoint, MetricsReport)> {
    let corpus = load_corpus(config)?;
    let seeds = resolve_seeds(&corpus, config)?;
    let out = run_pipeline(&corpus, seeds, config)?;
    let ck = Checkpoint::new(config.clone(), &corpus, out.state);
    Ok((ck, out.report))
}
