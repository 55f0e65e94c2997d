//! Privacy-preserving action recognition on tubelet tokens.
//!
//! A video is cut into tubelets and embedded as tokens. A stack of
//! sparsification blocks learns which tubelets can be discarded, an
//! anonymization block rewrites the rest back into pixels, and the
//! transformer is trained adversarially against action and privacy
//! recognizers. See [`pipeline`] for the end-to-end protocol.

pub mod anonymizer;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod frames;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod recognizer;
pub mod sparsifier;
pub mod tokenizer;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{CheckpointError, Error, Result};
pub use model::{ModelShape, PrivacyTransformer};
pub use tokenizer::{DecisionMatrix, TubeletLayout, VideoClip};
