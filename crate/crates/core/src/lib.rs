//! Learning-to-rank neural architecture search over tabular search spaces.
//!
//! A graph ranking model is pretrained on weak, weight-sharing-style labels with a
//! multi-task regression loss, then finetuned with LambdaRank so that the ordering it
//! produces maximizes NDCG. The finetuned model drives an iterative explore/exploit
//! sampling loop over the search space.
//!
//! Modules:
//!
//! - [`space`]: architecture graphs, space files, synthetic spaces and weak labels.
//! - [`metrics`]: relevance mapping, DCG/NDCG, Kendall's tau, Pearson, regret.
//! - [`nn`]: dense tensors, the graph encoder with its four heads, Adam, schedules.
//! - [`ltr`]: label normalization, losses, pretraining and LambdaRank finetuning.
//! - [`search`]: iterative sampling, top-k selection, surrogate evolution, baselines.
//! - [`cli`]: the `acenas` command-line surface.

pub mod cli;
pub mod error;
pub mod ltr;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod search;
pub mod space;

pub use error::{Error, Result};
