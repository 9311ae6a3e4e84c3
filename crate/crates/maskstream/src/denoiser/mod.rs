//! The mask-predictor contract: given a query, the visual-cache surrogate and
//! a partially masked activation window, produce a probability-of-Active for
//! every window position (resolved positions included — the retention check
//! re-evaluates carried-forward decisions).

mod neural;
mod oracle;
mod train;

pub use neural::{BlockParams, ModelConfig, NeuralDenoiser, Tensor, TrunkParams};
pub(crate) use neural::{trunk_backward, trunk_forward, TrunkTape};
pub use oracle::OracleDenoiser;
pub use train::{lr_at, train, LrSchedule, MaskingMixture, TrainOptions};

use crate::activation::{ActivationSequence, ActivationToken, ActivationWindow};
use crate::corruption::NoiseLevel;
use crate::{Error, Result};

/// Everything a predictor may condition on at one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PredictorContext<'a> {
    pub query_id: u32,
    /// Per-second feature vectors; the window's positions align to the most
    /// recent entries.
    pub features: &'a [Vec<f64>],
    pub window: &'a ActivationWindow,
}

impl<'a> PredictorContext<'a> {
    pub fn new(
        query_id: u32,
        features: &'a [Vec<f64>],
        window: &'a ActivationWindow,
    ) -> Result<Self> {
        if features.len() < window.len() {
            return Err(Error::InvalidArgument(format!(
                "{} features cannot cover a window of {} positions",
                features.len(),
                window.len()
            )));
        }
        Ok(PredictorContext { query_id, features, window })
    }
}

/// Per-position probability-of-Active, one entry per window position.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "probability outside [0, 1]".into(),
            ));
        }
        Ok(ProbVector(p))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// How strongly position `idx` leans toward either class.
    pub fn confidence(&self, idx: usize) -> f64 {
        let p = self.0[idx];
        p.max(1.0 - p)
    }

    /// Probability assigned to a specific resolved value.
    pub fn prob_of(&self, idx: usize, active: bool) -> f64 {
        if active {
            self.0[idx]
        } else {
            1.0 - self.0[idx]
        }
    }
}

/// A mask predictor. Implementations must be pure functions of their
/// parameters and the context.
pub trait Denoiser: Send + Sync {
    fn predict(&self, ctx: &PredictorContext) -> Result<ProbVector>;
}

/// Whether the conditioning copy carries the real window tokens or is blanked
/// to all-Masked (the duplication-ablation arm).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DuplicationMode {
    Enabled,
    Disabled,
}

/// One slot of the flattened model input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot {
    Query(u32),
    /// `index` into the feature list; `age` is seconds before the newest
    /// frame.
    Feature { index: usize, age: usize },
    /// Conditioning copy of the activation window.
    Cond { token: ActivationToken, age: usize },
    Sep,
    /// Prediction copy; model outputs are read here.
    Pred { token: ActivationToken, age: usize },
    /// Per-frame score slot used by the autoregressive baseline.
    Act { age: usize },
}

/// Flattened input layout `[query, features, window copy, separator, window
/// copy]`. Both copies carry identical token values; under causal attention
/// every prediction slot sees the whole conditioning copy as left-context.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub slots: Vec<Slot>,
    /// Index of the first prediction slot; prediction slots are contiguous.
    pub pred_start: usize,
    pub window_len: usize,
}

pub fn duplicate_input(ctx: &PredictorContext, mode: DuplicationMode) -> ModelLayout {
    let w = ctx.window.len();
    let f = ctx.features.len();
    let mut slots = Vec::with_capacity(1 + f + 2 * w + 1);
    slots.push(Slot::Query(ctx.query_id));
    for i in 0..f {
        slots.push(Slot::Feature { index: i, age: f - 1 - i });
    }
    for j in 0..w {
        let token = match mode {
            DuplicationMode::Enabled => ctx.window.token(j),
            DuplicationMode::Disabled => ActivationToken::Masked,
        };
        slots.push(Slot::Cond { token, age: w - 1 - j });
    }
    slots.push(Slot::Sep);
    let pred_start = slots.len();
    for j in 0..w {
        slots.push(Slot::Pred { token: ctx.window.token(j), age: w - 1 - j });
    }
    ModelLayout { slots, pred_start, window_len: w }
}

/// Masked cross-entropy, `1/t`-weighted: positions where `mask` is false
/// contribute nothing; each masked position adds `-(1/t)·ln p(target)`.
///
/// `t = 0` is only meaningful when nothing is masked (the sum is empty).
pub fn masked_ce_loss(
    probs: &ProbVector,
    target: &ActivationSequence,
    mask: &[bool],
    t: NoiseLevel,
) -> Result<f64> {
    if probs.len() != target.len() || mask.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: probs {}, target {}, mask {}",
            probs.len(),
            target.len(),
            mask.len()
        )));
    }
    let any_masked = mask.iter().any(|&m| m);
    if t.value() == 0.0 {
        if any_masked {
            return Err(Error::InvalidArgument(
                "1/t weight undefined at t = 0 with masked positions".into(),
            ));
        }
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (j, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let value = target.get(j).and_then(|tok| tok.as_bool()).ok_or_else(|| {
            Error::InvalidArgument(format!("target is masked at position {j}"))
        })?;
        sum -= probs.prob_of(j, value).ln();
    }
    Ok(sum / t.value())
}
