//! Laboratory for the trigger-output copying task.
//!
//! A single-layer attention model is trained with one analytic gradient step
//! on the value matrix followed by one step on the key-query matrix, both from
//! zero initialization. The crate measures which mechanism the trained
//! attention implements (a positional shortcut or an induction head) as a
//! function of the pretraining length distribution, and provides the
//! population-limit closed forms, the max-sum diversity ratio and the
//! compute-optimal pretraining distribution used to reason about it.
//!
//! Module map:
//!
//! * [`datagen`]: length distributions and sequence samplers.
//! * [`model`]: embedding, attention, prediction and loss.
//! * [`trainer`]: closed-form one-step gradients and the two-stage procedure.
//! * [`oracle`]: population-limit matrices, attention logits and the OOD certifier.
//! * [`diversity`]: max-sum ratio, optimal distribution, brute-force LP and KKT check.
//! * [`evalkit`]: OOD metrics, mechanism probe and heatmap export.
//! * [`experiment`]: configuration, sweeps and the command implementations behind the CLI.

pub mod checkpoint;
pub mod datagen;
pub mod diversity;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod matrix;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use datagen::{LengthDistribution, SamplerConfig, TokenSequence};
pub use error::{LabError, Result};
pub use matrix::Matrix;
pub use model::{EmbeddedSequence, ModelParams};
pub use trainer::TrainConfig;
