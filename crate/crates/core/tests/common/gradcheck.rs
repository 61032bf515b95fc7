//! Finite-difference harness for the loss gradients: a tiny model with
//! dropout off and the sampling noise held fixed.

use kdstm::corpus::BowDocument;
use kdstm::embedding::EmbeddingMatrix;
use kdstm::model::{
    batch_objective, Alignment, BatchItem, KdTarget, KdTerm, LossBreakdown, ModelConfig, ModelParams, Objective,
    OtTerm, TopicModel,
};
use kdstm::sinkhorn::SinkhornConfig;
use kdstm::vmf::VmfNoise;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const V: usize = 20;
pub const T: usize = 3;
pub const TOL: f64 = 1e-4;

pub fn tiny_model() -> TopicModel {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let e = Array2::from_shape_simple_fn((V, 6), || rng.gen::<f64>() - 0.5);
    let cfg = ModelConfig {
        num_topics: T,
        hidden: [8, 4],
        dropout: 0.5,
        kappa_cap: 10.0,
    };
    let mut model = TopicModel::new(cfg, EmbeddingMatrix::from_rows(e).unwrap(), 3).unwrap();
    // lift the biases so no ReLU sits near its kink
    model.params.b1.fill(0.3);
    model.params.b2.fill(0.3);
    model
}

pub fn docs(n: usize, seed: u64) -> Vec<BowDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut counts = Vec::new();
            for w in 0..V {
                if rng.gen::<f64>() < 0.35 {
                    counts.push((w, rng.gen_range(1..5u32)));
                }
            }
            if counts.is_empty() {
                counts.push((i % V, 3));
            }
            BowDocument {
                doc_id: format!("d{i}"),
                counts,
                label: None,
                tokens: Vec::new(),
            }
        })
        .collect()
}

/// Largest relative error between the analytic gradient of
/// `term(objective)` and central differences over every scalar parameter,
/// with the number of parameters checked. Relative errors are floored at an
/// absolute scale of 1e-4.
pub fn worst_relative_error(
    model: &TopicModel,
    items: &[BatchItem<'_>],
    objective: &Objective<'_>,
    term: fn(&LossBreakdown) -> f64,
) -> (f64, usize) {
    let (_, analytic) = batch_objective(model, items, objective).unwrap();
    let mass: f64 = analytic.slices().iter().flat_map(|s| s.iter()).map(|x| x.abs()).sum();
    assert!(mass > 1e-3, "gradient is trivially zero");
    let mut probe = model.clone();
    let names = ModelParams::tensor_names();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, name) in names.iter().enumerate() {
        let len = model.params.slices()[k].len();
        for i in 0..len {
            let x = model.params.slices()[k][i];
            let h = 1e-5 * x.abs().max(1.0);
            probe.params.slices_mut()[k][i] = x + h;
            let up = term(&batch_objective(&probe, items, objective).unwrap().0);
            probe.params.slices_mut()[k][i] = x - h;
            let down = term(&batch_objective(&probe, items, objective).unwrap().0);
            probe.params.slices_mut()[k][i] = x;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.slices()[k][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
                if rel > TOL {
                    eprintln!("{}[{i}]: analytic {a:e}, finite difference {fd:e}, rel {rel:e}", name);
                }
            }
            checked += 1;
        }
    }
    assert_eq!(checked, model.params.num_params());
    (worst, checked)
}

pub fn items<'a>(docs: &'a [BowDocument], kd: &'a [Option<KdTarget>]) -> Vec<BatchItem<'a>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    docs.iter()
        .zip(kd)
        .map(|(doc, target)| BatchItem {
            doc,
            noise: VmfNoise::draw(T, &mut rng),
            dropout: None,
            kd: target.as_ref(),
        })
        .collect()
}

pub fn only(recon: f64, kl: f64) -> Objective<'static> {
    Objective {
        recon_weight: recon,
        kl_weight: kl,
        ..Objective::unsupervised()
    }
}

pub fn reconstruction() -> (f64, usize) {
    let model = tiny_model();
    let d = docs(4, 1);
    let kd = vec![None; 4];
    worst_relative_error(&model, &items(&d, &kd), &only(1.0, 0.0), |l| l.recon)
}

pub fn kl() -> (f64, usize) {
    let model = tiny_model();
    let d = docs(4, 2);
    let kd = vec![None; 4];
    worst_relative_error(&model, &items(&d, &kd), &only(0.0, 1.0), |l| l.kl)
}

pub fn transport() -> (f64, usize) {
    let model = tiny_model();
    let d = docs(2, 3);
    let kd = vec![None; 2];
    let seeds = docs(6, 4);
    let objective = Objective {
        alpha: 1.0,
        ot: Some(OtTerm {
            seed_groups: seeds.chunks(2).map(|c| c.iter().collect()).collect(),
            plan: None,
            sinkhorn: SinkhornConfig {
                lambda: 50.0,
                max_iter: 200_000,
                tol: 1e-14,
            },
        }),
        ..only(0.0, 0.0)
    };
    worst_relative_error(&model, &items(&d, &kd), &objective, |l| l.ot)
}

pub fn distillation() -> (f64, usize) {
    let model = tiny_model();
    let d = docs(5, 6);
    let kd = vec![
        Some(KdTarget {
            teacher: vec![0.5, 0.3, 0.2],
            active: vec![true, false, true],
        }),
        None,
        Some(KdTarget {
            teacher: vec![0.1, 0.1, 0.8],
            active: vec![true, true, true],
        }),
        Some(KdTarget {
            teacher: vec![0.2, 0.7, 0.1],
            active: vec![false, true, false],
        }),
        None,
    ];
    let alignment = Alignment::new(vec![2, 0, 1], T).unwrap();
    let objective = Objective {
        beta: 1.0,
        kd: Some(KdTerm {
            alignment: &alignment,
            tau: 1.5,
        }),
        ..only(0.0, 0.0)
    };
    worst_relative_error(&model, &items(&d, &kd), &objective, |l| l.kd)
}

pub fn combined() -> (f64, usize) {
    let model = tiny_model();
    let d = docs(3, 7);
    let kd = vec![
        Some(KdTarget {
            teacher: vec![0.6, 0.2, 0.2],
            active: vec![true, true, true],
        }),
        None,
        None,
    ];
    let seeds = docs(3, 8);
    let alignment = Alignment::identity(T);
    let objective = Objective {
        recon_weight: 1.0,
        kl_weight: 1.0,
        alpha: 10.0,
        beta: 10.0,
        ot: Some(OtTerm {
            seed_groups: seeds.iter().map(|s| vec![s]).collect(),
            plan: None,
            sinkhorn: SinkhornConfig {
                lambda: 50.0,
                max_iter: 200_000,
                tol: 1e-14,
            },
        }),
        kd: Some(KdTerm {
            alignment: &alignment,
            tau: 1.0,
        }),
    };
    worst_relative_error(&model, &items(&d, &kd), &objective, |l| l.total)
}
