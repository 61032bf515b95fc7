//! Seed-guided neural topic modeling.
//!
//! A vMF-latent neural topic model is trained on raw text, its topics are
//! aligned to a handful of labeled seed documents per class through entropic
//! optimal transport, and the alignment is sharpened by distilling a
//! similarity-based teacher. The result is a text classifier trained from
//! about five labeled documents per class, with no pretrained components.

pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evalbench;
pub mod fixtures;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sinkhorn;
pub mod trainer;
pub mod vmf;

pub use error::{Error, Result};
