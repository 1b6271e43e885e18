//! Cross-domain sequential recommendation with multimodal embedding fusion.
//!
//! Items from two domains carry three representations: a learnable ID
//! embedding and two frozen embeddings (image and text) produced offline.
//! A user's history is split into three behavioral streams (domain X only,
//! domain Y only, and the chronologically merged stream); each of the nine
//! (stream, modality) pairs is encoded by its own causal self-attention
//! stack, scored against the item matrix by cosine similarity, and the
//! per-modality distributions are fused with convex weights. Training
//! minimizes a weighted sum of the per-stream negative log-likelihoods, and
//! serving aggregates the stream distributions over the target domain.
//!
//! Module map:
//! - [`corpus`]: interaction logs, filtering, temporal splits, batches
//! - [`embedstore`]: embedding matrices, their binary format, synthetic worlds
//! - [`tensor`]: dense tensors with reverse-mode gradients
//! - [`model`]: the nine-stream network, losses, recommendation, checkpoints
//! - [`trainer`]: Adam, early stopping, training history
//! - [`evaluator`]: MRR and NDCG@K
//! - [`promptkit`]: enrichment prompts and the response cache
//! - [`cli`]: the `emfrec` command-line entry point

pub mod cli;
pub mod corpus;
pub mod embedstore;
mod error;
pub mod evaluator;
pub mod model;
pub mod promptkit;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
