//! Ranking-consistent contrastive pretraining on a desk-scale dual encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a single-use reverse-mode tape ([`Graph`]).
//! - [`gradcheck`]: central finite-difference verification of tape gradients.
//! - [`ranking`]: the Plackett–Luce model, the list-wise rank loss and a brute-force oracle.
//! - [`losses`]: InfoNCE, cross-modal / in-modal consistency terms, the weighted total and
//!   the λ schedule.
//! - [`encoders`]: feed-forward towers projecting both modalities onto the unit hypersphere.
//! - [`data`]: hierarchical synthetic paired data with known class similarity.
//! - [`trainer`]: deterministic optimisation loop, optimisers and checkpoints.
//! - [`metrics`]: zero-shot accuracy, retrieval recall, alignment/uniformity, modality gap,
//!   in-modal rank consistency and linear probing.

mod codec;
pub mod data;
pub mod encoders;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod ranking;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::{DatasetSpec, PairedDataset, Split};
pub use encoders::{Activation, EncoderConfig, EncoderParams, Modality};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use losses::{Ablation, LambdaMode, LossBreakdown, LossConfig};
pub use metrics::{EvalConfig, MetricsReport};
pub use ranking::{RankLossConfig, RankingList};
pub use tensor::{Graph, Indices, Tensor, Var};
pub use trainer::{OptimizerKind, TrainConfig, TrainHistory, Trainer};
