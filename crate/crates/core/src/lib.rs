//! Listwise collaborative ranking.
//!
//! A low-rank score matrix `X = UᵀV` is fitted by maximum likelihood under a
//! permutation probability (Plackett–Luce) model over each user's ranked
//! list of items. Ties in observed relevance are handled by drawing a fresh
//! valid ordering every epoch, and implicit feedback rows are extended with
//! uniformly sampled unobserved items. The gradient of the listwise
//! objective is computed in time linear in the list length.
//!
//! Module map:
//!
//! - [`data`]: rating ingestion, binarization, train/test splitting.
//! - [`perm_model`]: permutation probabilities, the exponential-race
//!   sampler, stochastic queuing and negative sampling.
//! - [`objective`]: the regularized listwise loss and its gradients.
//! - [`trainer`]: the epoch loop with decaying block gradient steps.
//! - [`metrics`]: precision@k and NDCG@k.
//! - [`cli`]: the `sqlrank` command line.

pub mod checkpoint;
pub mod cli;
pub mod data;
mod error;
pub mod metrics;
pub mod objective;
pub mod perm_model;
pub mod presets;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod verify;

pub use data::{Feedback, IdMap, Rating, RatingsDataset, SplitSpec};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use objective::{FactorModel, Gradient, LossValue};
pub use perm_model::{Cutoff, PermRow, PermutationMatrix};
pub use trainer::{TrainConfig, TrainState};
