//! Two-stage traffic-sign recognition mathematics at desk scale.
//!
//! - [`tensor`]: row-major `f64` tensors, a reverse-mode tape and Adam.
//! - [`vision`]: space-to-depth, information loss, non-strided convolution,
//!   text-gated feature fusion and pooled cross-attention.
//! - [`boxes`]: IoU, inner IoU and the Inner-WIoU loss.
//! - [`tokenizer`]: regulation-aware normalization, semantic tuples, number
//!   protection and BPE.
//! - [`encoders`]: toy ViT and Transformer text encoder.
//! - [`contrastive`]: similarity, bidirectional contrastive loss, softmax
//!   classification and training.
//! - [`cache`]: text-embedding memoization and its throughput benchmark.
//! - [`metrics`]: TP/FP matching, precision/recall, 11-point AP50, mAP50:95.
//! - [`dataset`]: crop/describe/split construction and a synthetic long-tail
//!   sign generator.
//! - [`ablation`]: the classifier / tokenizer / cache ladder.

// `!(x > 0.0)` is how range checks here reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod boxes;
pub mod cache;
pub mod contrastive;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod vision;

pub use error::{Error, Result};
