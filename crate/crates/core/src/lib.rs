//! Vision classifiers trained with cross-entropy plus an InfoNCE alignment
//! term that pulls projected image features toward precomputed text
//! embeddings of per-image descriptions.
//!
//! Pipeline: [`descriptions`] builds a description set, [`cache`] encodes
//! it into a persisted embedding matrix, [`trainer`] optimizes a
//! [`models::ModelBundle`] against [`losses::total_objective`], and
//! [`analysis`] runs ablation sweeps and t-SNE embedding inspection.

pub mod analysis;
pub mod autodiff;
pub mod cache;
pub mod cli;
pub mod data;
pub mod descriptions;
pub mod error;
pub mod losses;
pub mod models;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
