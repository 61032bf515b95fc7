//! Three-stage training: the plain topic model, then transport alignment to
//! the seed groups, then similarity distillation.
//!
//! One Adam instance carries its moments through all stages. Stage 1 follows
//! a one-cycle schedule; later stages train at the base rate. Each stage
//! draws dropout masks and sampling noise from its own ChaCha8 stream of
//! `rng_seed`, so any stage can be rerun from a saved state with identical
//! results.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{BowDocument, Corpus, LabeledSeeds};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::{
    batch_objective, deterministic_topics, kd_targets, Alignment, BatchItem, DropoutMasks, KdTerm, LossBreakdown,
    Objective, OtTerm, SimilarityMatrix, TopicModel,
};
use crate::optim::{Adam, OneCycle};
use crate::sinkhorn::{build_cost_matrix, sinkhorn_with, TransportPlan};
use crate::vmf::VmfNoise;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub stage: u8,
    /// One-based within the stage.
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub ot: f64,
    pub kd: f64,
    pub total: f64,
    /// Rate of the epoch's first step.
    pub lr: f64,
    pub wall_ms: f64,
}

pub const TELEMETRY_HEADER: &str = "stage,epoch,recon,kl,ot,kd,total,lr,wall_ms";

pub fn telemetry_csv(rows: &[TelemetryRow]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3}",
            r.stage, r.epoch, r.recon, r.kl, r.ot, r.kd, r.total, r.lr, r.wall_ms
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_telemetry(path: impl AsRef<Path>, rows: &[TelemetryRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, telemetry_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last stage started (0 before any training).
    pub stage: u8,
    /// Epochs completed within `stage`.
    pub epoch: usize,
    pub model: TopicModel,
    pub optimizer: Adam,
    /// Eval-mode directions of every corpus document at the end of stage 1.
    pub mu_snapshot: Option<Array2<f64>>,
    pub seeds: Option<LabeledSeeds>,
    pub similarity: Option<SimilarityMatrix>,
    /// Plan of the most recent transport refresh.
    pub plan: Option<TransportPlan>,
    pub alignment: Option<Alignment>,
    pub telemetry: Vec<TelemetryRow>,
    pub stage_wall_ms: [f64; 3],
}

impl TrainState {
    pub fn new(
        corpus: &Corpus,
        word_embedding: EmbeddingMatrix,
        config: &TrainConfig,
        num_groups: usize,
    ) -> Result<Self> {
        config.validate()?;
        if word_embedding.len() != corpus.vocabulary.len() {
            return Err(Error::Dimension(format!(
                "{} embeddings for a vocabulary of {}",
                word_embedding.len(),
                corpus.vocabulary.len()
            )));
        }
        let model = TopicModel::new(config.model(num_groups), word_embedding, config.rng_seed)?;
        let optimizer = Adam::new(&model.params);
        Ok(TrainState {
            stage: 0,
            epoch: 0,
            model,
            optimizer,
            mu_snapshot: None,
            seeds: None,
            similarity: None,
            plan: None,
            alignment: None,
            telemetry: Vec::new(),
            stage_wall_ms: [0.0; 3],
        })
    }

    /// Rows of the telemetry belonging to `stage`.
    pub fn stage_telemetry(&self, stage: u8) -> Vec<TelemetryRow> {
        self.telemetry.iter().filter(|r| r.stage == stage).copied().collect()
    }

    /// Seed documents by group, in group order.
    fn seed_groups<'a>(&self, corpus: &'a Corpus) -> Result<Vec<Vec<&'a BowDocument>>> {
        let seeds = self
            .seeds
            .as_ref()
            .ok_or_else(|| Error::Contract("no seed groups attached".into()))?;
        Ok(seeds
            .groups
            .values()
            .map(|docs| docs.iter().map(|&i| &corpus.documents[i]).collect())
            .collect())
    }
}

/// Which terms a run of epochs optimizes, and under which stage it is
/// recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: u8,
    pub epochs: usize,
    pub transport: bool,
    pub distill: bool,
}

enum Schedule {
    OneCycle(OneCycle),
    Constant(f64),
}

impl Schedule {
    fn lr(&self, step: usize) -> f64 {
        match self {
            Schedule::OneCycle(s) => s.lr(step),
            Schedule::Constant(lr) => *lr,
        }
    }
}

fn stage_rng(config: &TrainConfig, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(stage as u64);
    rng
}

/// Builds a transport plan from the current deterministic topic
/// distributions of the seeds.
pub fn refresh_plan(
    model: &TopicModel,
    seed_groups: &[Vec<&BowDocument>],
    config: &TrainConfig,
) -> Result<TransportPlan> {
    let mut dists = Vec::with_capacity(seed_groups.len());
    for group in seed_groups {
        let mut d = Vec::with_capacity(group.len());
        for doc in group {
            let p = model.encode(doc, crate::model::Mode::Eval)?;
            d.push(deterministic_topics(p.mu(), p.kappa(), model.config.kappa_cap));
        }
        dists.push(d);
    }
    let cost = build_cost_matrix(&dists)?;
    sinkhorn_with(&cost, &config.sinkhorn())
}

/// Runs `plan.epochs` epochs over the whole corpus.
///
/// A non-finite loss stops training before the offending update, leaving
/// `state` at the last good parameters.
pub fn run_stage(state: &mut TrainState, corpus: &Corpus, config: &TrainConfig, plan: StagePlan) -> Result<()> {
    let start = Instant::now();
    let n_docs = corpus.len();
    if n_docs == 0 {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let bs = config.batch_size.min(n_docs);
    let steps_per_epoch = n_docs.div_ceil(bs);
    let schedule = if plan.stage == 1 {
        let total = steps_per_epoch * plan.epochs;
        let warm_epochs = ((config.warmup_fraction * plan.epochs as f64).round() as usize).max(1);
        let warmup = steps_per_epoch * warm_epochs;
        match OneCycle::new(total, warmup, config.lr, config.max_lr, config.final_lr) {
            Ok(s) => Schedule::OneCycle(s),
            Err(_) => Schedule::Constant(config.lr),
        }
    } else {
        Schedule::Constant(config.lr)
    };

    let seed_groups = if plan.transport {
        Some(state.seed_groups(corpus)?)
    } else {
        None
    };
    let targets = if plan.distill {
        let sim = state
            .similarity
            .as_ref()
            .ok_or_else(|| Error::Contract("distillation needs the similarity matrix".into()))?;
        if state.alignment.is_none() {
            return Err(Error::Contract("distillation needs a topic alignment".into()));
        }
        Some(kd_targets(sim, config.tau, config.thresh)?)
    } else {
        None
    };

    let mut rng = stage_rng(config, plan.stage);
    let mut order: Vec<usize> = (0..n_docs).collect();
    let t_count = state.model.num_topics();
    let hidden = state.model.config.hidden;
    let dropout = state.model.config.dropout;
    state.stage = plan.stage;
    state.epoch = 0;

    for epoch in 0..plan.epochs {
        let epoch_start = Instant::now();
        if let Some(groups) = &seed_groups {
            state.plan = Some(refresh_plan(&state.model, groups, config)?);
        }
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut kd_batches = 0usize;
        let lr_first = schedule.lr(epoch * steps_per_epoch);
        for (b, chunk) in order.chunks(bs).enumerate() {
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| {
                    let masks = DropoutMasks::draw(hidden, dropout, &mut rng);
                    let noise = VmfNoise::draw(t_count, &mut rng);
                    BatchItem {
                        doc: &corpus.documents[i],
                        noise,
                        dropout: Some(masks),
                        kd: targets.as_ref().and_then(|t| t.get(&i)),
                    }
                })
                .collect();
            let objective = Objective {
                recon_weight: 1.0,
                kl_weight: 1.0,
                alpha: config.alpha,
                beta: config.beta,
                ot: seed_groups.as_ref().map(|groups| OtTerm {
                    seed_groups: groups.clone(),
                    plan: state.plan.as_ref(),
                    sinkhorn: config.sinkhorn(),
                }),
                kd: state
                    .alignment
                    .as_ref()
                    .filter(|_| plan.distill)
                    .map(|alignment| KdTerm {
                        alignment,
                        tau: config.tau,
                    }),
            };
            let (loss, grads) = batch_objective(&state.model, &items, &objective).map_err(|e| match e {
                Error::Numerical(_) => Error::NonFiniteLoss {
                    stage: plan.stage,
                    epoch: epoch + 1,
                },
                other => other,
            })?;
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: plan.stage,
                    epoch: epoch + 1,
                });
            }
            let lr = schedule.lr(epoch * steps_per_epoch + b);
            state.optimizer.step(&mut state.model.params, &grads, lr)?;
            let w = chunk.len() as f64;
            sums.recon += w * loss.recon;
            sums.kl += w * loss.kl;
            sums.ot += loss.ot;
            if items.iter().any(|it| it.kd.is_some()) {
                sums.kd += loss.kd;
                kd_batches += 1;
            }
        }
        let n = n_docs as f64;
        let mut row = TelemetryRow {
            stage: plan.stage,
            epoch: epoch + 1,
            recon: sums.recon / n,
            kl: sums.kl / n,
            ot: sums.ot / steps_per_epoch as f64,
            kd: if kd_batches > 0 {
                sums.kd / kd_batches as f64
            } else {
                0.0
            },
            total: 0.0,
            lr: lr_first,
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        };
        row.total = row.recon + row.kl;
        if plan.transport {
            row.total += config.alpha * row.ot;
        }
        if plan.distill {
            row.total += config.beta * row.kd;
        }
        if !row.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: plan.stage,
                epoch: epoch + 1,
            });
        }
        state.telemetry.push(row);
        state.epoch = epoch + 1;
    }
    if let Some(groups) = &seed_groups {
        state.plan = Some(refresh_plan(&state.model, groups, config)?);
    }
    state.stage_wall_ms[(plan.stage - 1) as usize] += start.elapsed().as_secs_f64() * 1e3;
    Ok(())
}

/// Eval-mode directions of every corpus document.
pub fn snapshot_directions(model: &TopicModel, corpus: &Corpus) -> Result<Array2<f64>> {
    let docs: Vec<&BowDocument> = corpus.documents.iter().collect();
    Ok(model.encode_all(&docs)?.0)
}

/// Stage 1: reconstruction and KL only, then a snapshot of every document's
/// direction for the similarity teacher.
pub fn train_stage1(state: &mut TrainState, corpus: &Corpus, config: &TrainConfig) -> Result<()> {
    if state.stage != 0 {
        return Err(Error::Contract(format!("stage 1 cannot follow stage {}", state.stage)));
    }
    let plan = StagePlan {
        stage: 1,
        epochs: config.stage1_epochs,
        transport: false,
        distill: false,
    };
    run_stage(state, corpus, config, plan)?;
    let start = Instant::now();
    state.mu_snapshot = Some(snapshot_directions(&state.model, corpus)?);
    state.stage_wall_ms[0] += start.elapsed().as_secs_f64() * 1e3;
    Ok(())
}

/// Attaches seed groups and freezes the similarity matrix between the
/// stage-1 directions of non-seed documents and of the seeds.
pub fn attach_seeds(state: &mut TrainState, corpus: &Corpus, seeds: LabeledSeeds) -> Result<()> {
    if state.stage != 1 {
        return Err(Error::Contract("seeds are attached once, right after stage 1".into()));
    }
    let snapshot = state
        .mu_snapshot
        .as_ref()
        .ok_or_else(|| Error::Contract("stage-1 direction snapshot is missing".into()))?;
    if snapshot.nrows() != corpus.len() {
        return Err(Error::Dimension("direction snapshot does not match the corpus".into()));
    }
    let num_groups = seeds.num_groups();
    if state.model.num_topics() < num_groups {
        return Err(Error::Config(format!(
            "{} topics cannot cover {num_groups} seed groups",
            state.model.num_topics()
        )));
    }
    if let Some(&bad) = seeds.groups.values().flatten().find(|&&i| i >= corpus.len()) {
        return Err(Error::InvalidInput(format!("seed document {bad} outside the corpus")));
    }
    let seed_set = seeds.seed_set();
    let rows: Vec<usize> = (0..corpus.len()).filter(|i| !seed_set.contains(i)).collect();
    let columns = seeds.flattened();
    let doc_mus = snapshot.select(ndarray::Axis(0), &rows);
    let seed_idx: Vec<usize> = columns.iter().map(|&(_, d)| d).collect();
    let seed_mus = snapshot.select(ndarray::Axis(0), &seed_idx);
    let mut sim = SimilarityMatrix::compute(
        doc_mus.view(),
        rows,
        seed_mus.view(),
        columns.iter().map(|&(g, _)| g).collect(),
    )?;
    sim.freeze();
    state.similarity = Some(sim);
    state.seeds = Some(seeds);
    Ok(())
}

/// Stage 2: adds the transport loss for `stage2_epochs`.
pub fn train_stage2(state: &mut TrainState, corpus: &Corpus, seeds: LabeledSeeds, config: &TrainConfig) -> Result<()> {
    if state.stage != 1 || state.mu_snapshot.is_none() {
        return Err(Error::Contract("stage 2 needs a completed stage 1".into()));
    }
    let start = Instant::now();
    attach_seeds(state, corpus, seeds)?;
    state.stage_wall_ms[1] += start.elapsed().as_secs_f64() * 1e3;
    let plan = StagePlan {
        stage: 2,
        epochs: config.stage2_epochs,
        transport: true,
        distill: false,
    };
    run_stage(state, corpus, config, plan)
}

/// Stage 3: fixes the topic alignment from the final stage-2 plan and adds
/// the distillation loss for `stage3_epochs`.
pub fn train_stage3(state: &mut TrainState, corpus: &Corpus, config: &TrainConfig) -> Result<()> {
    if state.stage != 2 {
        return Err(Error::Contract("stage 3 needs a completed stage 2".into()));
    }
    let plan = state
        .plan
        .as_ref()
        .ok_or_else(|| Error::Contract("no transport plan from stage 2".into()))?;
    state.alignment = Some(Alignment::from_plan(plan)?);
    let plan = StagePlan {
        stage: 3,
        epochs: config.stage3_epochs,
        transport: true,
        distill: true,
    };
    run_stage(state, corpus, config, plan)
}
