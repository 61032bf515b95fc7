use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Every trainable tensor. Gradients and optimizer moments reuse the type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_mu: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub w_kappa: Array1<f64>,
    pub b_kappa: Array1<f64>,
    /// `|T| x d` topic embedding.
    pub topic_embedding: Array2<f64>,
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ModelParams {
    pub fn init<R: Rng>(vocab: usize, hidden: [usize; 2], topics: usize, embed_dim: usize, rng: &mut R) -> Self {
        let [h1, h2] = hidden;
        let w1 = glorot(vocab, h1, rng);
        let w2 = glorot(h1, h2, rng);
        let w_mu = glorot(h2, topics, rng);
        let w_kappa = glorot(h2, 1, rng).into_shape_with_order(h2).expect("column vector");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let topic_embedding = Array2::from_shape_simple_fn((topics, embed_dim), || normal.sample(rng));
        // keeps the direction defined when every hidden unit is off
        let b_mu = Array1::from_shape_simple_fn(topics, || 0.1 * normal.sample(rng));
        ModelParams {
            w1,
            b1: Array1::zeros(h1),
            w2,
            b2: Array1::zeros(h2),
            w_mu,
            b_mu,
            w_kappa,
            b_kappa: Array1::zeros(1),
            topic_embedding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
            w_mu: Array2::zeros(self.w_mu.dim()),
            b_mu: Array1::zeros(self.b_mu.len()),
            w_kappa: Array1::zeros(self.w_kappa.len()),
            b_kappa: Array1::zeros(1),
            topic_embedding: Array2::zeros(self.topic_embedding.dim()),
        }
    }

    pub fn tensor_names() -> [&'static str; 9] {
        [
            "w1",
            "b1",
            "w2",
            "b2",
            "w_mu",
            "b_mu",
            "w_kappa",
            "b_kappa",
            "topic_embedding",
        ]
    }

    pub fn slices(&self) -> [&[f64]; 9] {
        fn s(x: Option<&[f64]>) -> &[f64] {
            x.expect("parameters are contiguous")
        }
        [
            s(self.w1.as_slice()),
            s(self.b1.as_slice()),
            s(self.w2.as_slice()),
            s(self.b2.as_slice()),
            s(self.w_mu.as_slice()),
            s(self.b_mu.as_slice()),
            s(self.w_kappa.as_slice()),
            s(self.b_kappa.as_slice()),
            s(self.topic_embedding.as_slice()),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        let ModelParams {
            w1,
            b1,
            w2,
            b2,
            w_mu,
            b_mu,
            w_kappa,
            b_kappa,
            topic_embedding,
        } = self;
        [
            w1.as_slice_mut().expect("contiguous"),
            b1.as_slice_mut().expect("contiguous"),
            w2.as_slice_mut().expect("contiguous"),
            b2.as_slice_mut().expect("contiguous"),
            w_mu.as_slice_mut().expect("contiguous"),
            b_mu.as_slice_mut().expect("contiguous"),
            w_kappa.as_slice_mut().expect("contiguous"),
            b_kappa.as_slice_mut().expect("contiguous"),
            topic_embedding.as_slice_mut().expect("contiguous"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}
