//! Masked-denoising activation engine for streaming event triggers.
//!
//! The crate models the "when to respond" decision over a live event stream
//! as structured sequence denoising: a sliding window of per-second binary
//! activation states is kept jointly consistent by a mask predictor that
//! re-masks low-confidence positions and progressively unmasks the rest,
//! instead of making isolated per-frame yes/no calls.
//!
//! Module map:
//!
//! - [`activation`] — activation tokens, sequences, the sliding window and
//!   span/trigger algebra shared by everything else.
//! - [`corruption`] — the forward masking process: independent masking plus
//!   the structured block strategies used for training.
//! - [`streamgen`] — synthetic stream construction (features, event spans,
//!   training-window sampling) replacing a real video/vision stack.
//! - [`denoiser`] — the mask-predictor contract, an oracle test double, a
//!   small trainable causal-attention model, the masked cross-entropy loss
//!   and the training loop.
//! - [`engine`] — the online loop: window advance, selective re-masking,
//!   K-step progressive denoising, trigger issuance and context bookkeeping.
//! - [`baseline`] — the point-wise autoregressive comparator (per-frame
//!   score head, fixed threshold).
//! - [`metrics`] — segment F1, boundary-aligned transition histograms.
//! - [`harness`] — end-to-end evaluation, ablation drivers, reports.
//! - [`config`] — serde config types consumed by the CLI.

pub mod activation;
pub mod baseline;
pub mod config;
pub mod corruption;
pub mod denoiser;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod streamgen;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence contains masked tokens")]
    UnresolvedSequence,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("training failed at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
