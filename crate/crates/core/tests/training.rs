//! Stage state machine, determinism, degenerate coefficients, telemetry,
//! and checkpoints on a small synthetic corpus.

use std::sync::OnceLock;
use std::time::Instant;

use kdstm::config::TrainConfig;
use kdstm::corpus::BowDocument;
use kdstm::corpus::{sample_seeds, Corpus, LabeledSeeds};
use kdstm::embedding::{train_word_embeddings, EmbeddingMatrix};
use kdstm::evalbench::{benchmark, evaluate, predict, tau_sweep};
use kdstm::fixtures::{synthetic_corpus, SyntheticSpec};
use kdstm::model::Alignment;
use kdstm::pipeline::{build_corpus, run_pipeline, Checkpoint};
use kdstm::trainer::{
    attach_seeds, run_stage, train_stage1, train_stage2, train_stage3, StagePlan, TrainState, TELEMETRY_HEADER,
};

fn config() -> TrainConfig {
    TrainConfig {
        embed_dim: 24,
        embed_epochs: 3,
        hidden1: 48,
        hidden2: 24,
        batch_size: 64,
        stage1_epochs: 10,
        stage2_epochs: 4,
        stage3_epochs: 4,
        rng_seed: 3,
        ..TrainConfig::default()
    }
}

struct Fixture {
    corpus: Corpus,
    seeds: LabeledSeeds,
    embeddings: EmbeddingMatrix,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticSpec {
            docs_per_class: 50,
            ..SyntheticSpec::default()
        };
        let cfg = config();
        let corpus = build_corpus(&synthetic_corpus(&spec, 7), &cfg).unwrap();
        let seeds = sample_seeds(&corpus, 5, cfg.rng_seed).unwrap();
        let embeddings = train_word_embeddings(&corpus, &cfg.sgns()).unwrap().matrix;
        Fixture {
            corpus,
            seeds,
            embeddings,
        }
    })
}

fn stage1_state(cfg: &TrainConfig) -> TrainState {
    let f = fixture();
    let mut state = TrainState::new(&f.corpus, f.embeddings.clone(), cfg, f.seeds.num_groups()).unwrap();
    train_stage1(&mut state, &f.corpus, cfg).unwrap();
    state
}

fn stage2_state(cfg: &TrainConfig) -> TrainState {
    let f = fixture();
    let mut state = stage1_state(cfg);
    train_stage2(&mut state, &f.corpus, f.seeds.clone(), cfg).unwrap();
    state
}

#[test]
fn stages_run_in_order() {
    let f = fixture();
    let cfg = config();
    let mut state = TrainState::new(&f.corpus, f.embeddings.clone(), &cfg, 4).unwrap();
    assert!(train_stage2(&mut state, &f.corpus, f.seeds.clone(), &cfg).is_err());
    assert!(train_stage3(&mut state, &f.corpus, &cfg).is_err());
    train_stage1(&mut state, &f.corpus, &cfg).unwrap();
    assert!(state.similarity.is_none());
    assert!(train_stage1(&mut state, &f.corpus, &cfg).is_err());
    train_stage2(&mut state, &f.corpus, f.seeds.clone(), &cfg).unwrap();
    assert!(state.similarity.as_ref().unwrap().is_frozen());
    train_stage3(&mut state, &f.corpus, &cfg).unwrap();
    assert_eq!(state.stage, 3);
    assert_eq!(
        state.telemetry.len(),
        cfg.stage1_epochs + cfg.stage2_epochs + cfg.stage3_epochs
    );
}

#[test]
fn fixed_seed_gives_identical_parameters() {
    let cfg = config();
    let a = stage2_state(&cfg);
    let b = stage2_state(&cfg);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.optimizer, b.optimizer);
    let other = stage1_state(&TrainConfig { rng_seed: 4, ..cfg });
    assert_ne!(a.model.params.w1, other.model.params.w1);
}

#[test]
fn zero_alpha_continues_stage_one() {
    let f = fixture();
    let cfg = TrainConfig { alpha: 0.0, ..config() };
    let start = stage1_state(&cfg);

    let mut with_term = start.clone();
    train_stage2(&mut with_term, &f.corpus, f.seeds.clone(), &cfg).unwrap();

    let mut plain = start;
    attach_seeds(&mut plain, &f.corpus, f.seeds.clone()).unwrap();
    let continued = StagePlan {
        stage: 2,
        epochs: cfg.stage2_epochs,
        transport: false,
        distill: false,
    };
    run_stage(&mut plain, &f.corpus, &cfg, continued).unwrap();

    assert_eq!(with_term.model.params, plain.model.params);
    let recon = |s: &TrainState| s.stage_telemetry(2).iter().map(|r| r.recon).collect::<Vec<_>>();
    assert_eq!(recon(&with_term), recon(&plain));
}

#[test]
fn zero_beta_continues_stage_two() {
    let f = fixture();
    let cfg = TrainConfig { beta: 0.0, ..config() };
    let start = stage2_state(&cfg);

    let mut with_term = start.clone();
    train_stage3(&mut with_term, &f.corpus, &cfg).unwrap();

    let mut plain = start;
    plain.alignment = Some(Alignment::from_plan(plain.plan.as_ref().unwrap()).unwrap());
    let continued = StagePlan {
        stage: 3,
        epochs: cfg.stage3_epochs,
        transport: true,
        distill: false,
    };
    run_stage(&mut plain, &f.corpus, &cfg, continued).unwrap();

    assert_eq!(with_term.model.params, plain.model.params);
}

#[test]
fn similarity_stays_frozen_through_fine_tuning() {
    let f = fixture();
    let cfg = config();
    let mut state = stage1_state(&cfg);
    attach_seeds(&mut state, &f.corpus, f.seeds.clone()).unwrap();
    let before = state.similarity.as_ref().unwrap().to_bytes();
    // attach_seeds ran already, so continue stage 2 by hand
    run_stage(
        &mut state,
        &f.corpus,
        &cfg,
        StagePlan {
            stage: 2,
            epochs: cfg.stage2_epochs,
            transport: true,
            distill: false,
        },
    )
    .unwrap();
    train_stage3(&mut state, &f.corpus, &cfg).unwrap();
    assert_eq!(state.similarity.as_ref().unwrap().to_bytes(), before);
    assert_eq!(
        state.similarity.as_ref().unwrap().as_array().nrows(),
        f.corpus.len() - 20
    );
}

#[test]
fn telemetry_follows_the_schedule() {
    let cfg = config();
    let state = stage2_state(&cfg);
    let s1 = state.stage_telemetry(1);
    assert_eq!(s1.len(), cfg.stage1_epochs);
    assert_eq!(s1[0].lr, cfg.lr);
    let peak = s1.iter().map(|r| r.lr).fold(0.0, f64::max);
    let peak_epoch = s1.iter().position(|r| r.lr == peak).unwrap();
    assert!(peak > 0.9 * cfg.max_lr && peak <= cfg.max_lr);
    assert!(s1[..=peak_epoch].windows(2).all(|w| w[1].lr > w[0].lr));
    assert!(s1[peak_epoch..].windows(2).all(|w| w[1].lr < w[0].lr));
    assert!(s1.last().unwrap().lr < cfg.lr);
    assert!(state
        .stage_telemetry(2)
        .iter()
        .all(|r| r.lr == cfg.lr && r.ot != 0.0 && r.kd == 0.0));

    let csv = kdstm::trainer::telemetry_csv(&state.telemetry);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TELEMETRY_HEADER));
    assert_eq!(lines.count(), cfg.stage1_epochs + cfg.stage2_epochs);
}

#[test]
fn losses_fall_within_each_stage() {
    let f = fixture();
    let cfg = config();
    let mut state = stage2_state(&cfg);
    let s1 = state.stage_telemetry(1);
    assert!(s1.last().unwrap().total < s1[0].total);
    let s2 = state.stage_telemetry(2);
    assert!(
        s2.last().unwrap().ot < s2[0].ot,
        "{} -> {}",
        s2[0].ot,
        s2.last().unwrap().ot
    );

    let alignment = Alignment::from_plan(state.plan.as_ref().unwrap()).unwrap();
    let mut topics = alignment.group_topics().to_vec();
    topics.sort();
    topics.dedup();
    assert_eq!(topics.len(), f.seeds.num_groups());

    train_stage3(&mut state, &f.corpus, &cfg).unwrap();
    let s3 = state.stage_telemetry(3);
    assert!(s3.last().unwrap().kd < s3[0].kd);
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let f = fixture();
    let cfg = config();
    let mut state = stage2_state(&cfg);
    train_stage3(&mut state, &f.corpus, &cfg).unwrap();
    let ck = Checkpoint::new(cfg, &f.corpus, state);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);

    let docs: Vec<&BowDocument> = f.corpus.documents.iter().collect();
    let a = predict(&ck.state.model, ck.state.alignment.as_ref().unwrap(), &docs).unwrap();
    let b = predict(&back.state.model, back.state.alignment.as_ref().unwrap(), &docs).unwrap();
    assert_eq!(a, b);

    let pairs = back.eval_pairs(&f.corpus).unwrap();
    assert_eq!(pairs, f.seeds.eval_set(&f.corpus));

    // a stage-1 checkpoint resumes into stage 2 like an uninterrupted run
    let cfg = config();
    let s1 = Checkpoint::new(cfg.clone(), &f.corpus, stage1_state(&cfg));
    let mut resumed = Checkpoint::from_json(&s1.to_json()).unwrap().state;
    train_stage2(&mut resumed, &f.corpus, f.seeds.clone(), &cfg).unwrap();
    assert_eq!(resumed.model.params, stage2_state(&cfg).model.params);

    assert!(Checkpoint::from_json(&s1.to_json().replace("kdstm-checkpoint", "other")).is_err());
}

#[test]
fn single_temperature_sweep_matches_stage_three() {
    let f = fixture();
    let cfg = config();
    let start = stage2_state(&cfg);
    let rows = tau_sweep(&start, &f.corpus, &cfg, &[cfg.tau]).unwrap();
    let mut state = start;
    train_stage3(&mut state, &f.corpus, &cfg).unwrap();
    let m = evaluate(&state.model, state.alignment.as_ref().unwrap(), &f.corpus, &f.seeds).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(
        (rows[0].accuracy, rows[0].micro_f1, rows[0].auc),
        (m.accuracy, m.micro_f1, m.auc)
    );
}

#[test]
fn pipeline_is_fast_reproducible_and_complete() {
    let f = fixture();
    let cfg = TrainConfig {
        embed_dim: 50,
        embed_epochs: 5,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let a = run_pipeline(&f.corpus, f.seeds.clone(), &cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(f.corpus.len(), 200);

    let json: serde_json::Value = serde_json::from_str(&a.report.to_json()).unwrap();
    for key in ["accuracy", "micro_f1", "auc", "per_class", "wall_ms_per_stage"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let stages: Vec<&String> = a.report.wall_ms_per_stage.keys().collect();
    assert_eq!(stages, ["embed", "stage1", "stage2", "stage3"]);

    let b = run_pipeline(&f.corpus, f.seeds.clone(), &cfg).unwrap();
    assert_eq!(a.report.without_timing().to_json(), b.report.without_timing().to_json());
    assert_eq!(a.state.model.params, b.state.model.params);
}

#[test]
fn one_run_benchmark_reports_that_run() {
    let f = fixture();
    let report = benchmark(&f.corpus, &config(), 1).unwrap();
    assert!(!report.partial);
    let run = &report.runs[0];
    let acc = report.accuracy.unwrap();
    assert_eq!((acc.mean, acc.min, acc.max), (run.accuracy, run.accuracy, run.accuracy));
    assert_eq!(report.auc.unwrap().mean, run.auc);
    assert_eq!(report.micro_f1.unwrap().mean, run.micro_f1);
}
