//! Invariants of the metrics, the teacher, and the model's distributions.

use kdstm::corpus::BowDocument;
use kdstm::embedding::EmbeddingMatrix;
use kdstm::evalbench::{accuracy, argmax, auc_roc, micro_f1};
use kdstm::model::{kd_doc_loss, teacher_distribution, KdTarget, Mode, ModelConfig, TopicMode, TopicModel};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels(n: usize, k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn small_model(seed: u64) -> TopicModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = Array2::from_shape_fn((30, 8), |_| rng.gen::<f64>() - 0.5);
    let cfg = ModelConfig {
        num_topics: 4,
        hidden: [16, 8],
        dropout: 0.5,
        kappa_cap: 10.0,
    };
    TopicModel::new(cfg, EmbeddingMatrix::from_rows(e).unwrap(), seed).unwrap()
}

fn doc_from(counts: &[(usize, u32)]) -> Option<BowDocument> {
    let mut ids: Vec<(usize, u32)> = counts.to_vec();
    ids.sort();
    ids.dedup_by_key(|p| p.0);
    let doc = BowDocument {
        doc_id: "d".into(),
        counts: ids,
        label: None,
        tokens: Vec::new(),
    };
    (doc.total() > 0).then_some(doc)
}

proptest! {
    #[test]
    fn micro_f1_equals_accuracy((preds, golds) in (1usize..200, 2usize..6).prop_flat_map(|(n, k)| labels(n, k))) {
        prop_assert_eq!(micro_f1(&preds, &golds).unwrap(), accuracy(&preds, &golds).unwrap());
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 10..60),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut golds: Vec<usize> = (0..scores.len()).map(|_| rng.gen_range(0..3)).collect();
        golds[0] = 0;
        golds[1] = 1;
        let warped: Vec<Vec<f64>> = scores
            .iter()
            .map(|r| r.iter().map(|&x| (3.0 * x).exp() + x.powi(3)).collect())
            .collect();
        let a = auc_roc(&scores, &golds, 3).unwrap();
        let b = auc_roc(&warped, &golds, 3).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn teacher_argmax_ignores_tau(maxima in prop::collection::vec(-1.0f64..1.0, 2..8), t1 in 0.01f64..50.0, t2 in 0.01f64..50.0) {
        let a = teacher_distribution(&maxima, t1).unwrap();
        let b = teacher_distribution(&maxima, t2).unwrap();
        prop_assert_eq!(argmax(&a), argmax(&b));
        prop_assert_eq!(argmax(&a), argmax(&maxima));
    }

    #[test]
    fn distillation_loss_is_nonnegative(
        (teacher, q) in (2usize..7).prop_flat_map(|k| (simplex(k), simplex(k))),
        active_bits in any::<u8>(),
        tau in 0.1f64..5.0,
    ) {
        let active: Vec<bool> = (0..teacher.len()).map(|g| active_bits >> g & 1 == 1).collect();
        let (loss, _) = kd_doc_loss(&KdTarget { teacher, active }, &q, tau);
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn model_distributions_sum_to_one(
        counts in prop::collection::vec((0usize..30, 1u32..5), 1..20),
        seed in 0u64..20,
    ) {
        let model = small_model(seed);
        let doc = doc_from(&counts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let det = model.topic_distribution(&doc, TopicMode::Deterministic).unwrap();
        let sampled = model.topic_distribution(&doc, TopicMode::Sampled(&mut rng)).unwrap();
        for t_d in [&det, &sampled] {
            prop_assert!((t_d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let words = model.decode(t_d).unwrap();
            prop_assert!((words.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let b = model.topic_word_matrix().unwrap();
        for row in b.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let params = model.encode(&doc, Mode::Train(&mut rng)).unwrap();
        prop_assert!((params.mu().iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn auc_extremes() {
    let golds = vec![0, 0, 1, 1, 2, 2];
    let perfect: Vec<Vec<f64>> = golds
        .iter()
        .map(|&g| (0..3).map(|c| f64::from(u8::from(c == g))).collect())
        .collect();
    let inverted: Vec<Vec<f64>> = perfect.iter().map(|r| r.iter().map(|x| 1.0 - x).collect()).collect();
    assert_eq!(auc_roc(&perfect, &golds, 3).unwrap(), 1.0);
    assert_eq!(auc_roc(&inverted, &golds, 3).unwrap(), 0.0);
}
