//! Training loop for the mask predictor: per step, draw a window from a
//! random stream, rasterize the target, corrupt it with the configured
//! masking mixture, apply the multi-event inactive override, and take one
//! clipped SGD step on the 1/t-weighted masked cross-entropy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationWindow;
use crate::corruption::{
    apply_inactive_override, mask_boundary_span, mask_full, mask_independent,
    sample_training_corruption, NoiseLevel,
};
use crate::denoiser::neural::{NeuralDenoiser, NeuralGrad};
use crate::denoiser::PredictorContext;
use crate::streamgen::{build_target, multi_event_cutoff, sample_training_window, StreamSample};
use crate::{Error, Result};

/// Which corruption distribution a training run draws from. The arms mirror
/// the masking-strategy ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMixture {
    /// Token-wise independent masking only.
    IndependentOnly,
    /// Boundary-anchored block masking only.
    SpanOnly,
    /// Boundary blocks and full masking, evens.
    SpanFull,
    /// Boundary blocks, span unmasking and full masking, uniform thirds.
    Mixture,
}

/// Learning-rate schedule over the step budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to zero across the run.
    Cosine,
}

/// Per-step learning rate under a schedule.
pub fn lr_at(lr: f64, schedule: LrSchedule, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => lr,
        LrSchedule::Cosine => {
            let t = step as f64 / total.max(1) as f64;
            lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    /// Cap on sampled training-window length (the window capacity W).
    pub window_max: u64,
    /// Margin for span unmasking.
    pub margin: usize,
    pub mixture: MaskingMixture,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            lr: 0.05,
            lr_schedule: LrSchedule::Cosine,
            clip_norm: 1.0,
            window_max: 256,
            margin: 2,
            mixture: MaskingMixture::Mixture,
            seed: 0,
        }
    }
}

fn sgd_step(model: &mut NeuralDenoiser, grad: &mut NeuralGrad, lr: f64, clip_norm: f64) {
    let mut sq = 0.0;
    for s in grad.slices_mut() {
        for &g in s.iter() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    let scale = if norm > clip_norm && norm > 0.0 {
        clip_norm / norm
    } else {
        1.0
    };
    let step = lr * scale;
    for (p, g) in model.slices_mut().into_iter().zip(grad.slices_mut()) {
        for (pv, &gv) in p.iter_mut().zip(g.iter()) {
            *pv -= step * gv;
        }
    }
}

/// Train in place; returns the per-step loss curve.
pub fn train(
    model: &mut NeuralDenoiser,
    corpus: &[StreamSample],
    opts: &TrainOptions,
) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let sample = &corpus[rng.gen_range(0..corpus.len())];
        let spec = &sample.spec;
        let (win_start, win_len) =
            sample_training_window(spec.length_s, opts.window_max, &mut rng);
        let target = build_target(win_start, win_len, &spec.events);

        let mut rec = match opts.mixture {
            MaskingMixture::IndependentOnly => {
                let t = NoiseLevel::new(rng.gen::<f64>())?;
                mask_independent(&target, t, &mut rng)?
            }
            MaskingMixture::SpanOnly => {
                let t = NoiseLevel::new(rng.gen::<f64>())?;
                mask_boundary_span(&target, t, &mut rng)?
            }
            MaskingMixture::SpanFull => {
                if rng.gen::<bool>() {
                    let t = NoiseLevel::new(rng.gen::<f64>())?;
                    mask_boundary_span(&target, t, &mut rng)?
                } else {
                    mask_full(&target)
                }
            }
            MaskingMixture::Mixture => sample_training_corruption(&target, opts.margin, &mut rng)?,
        };

        // multi-event streams: pick the current event and blank everything
        // before a cutoff sampled in the preceding gap
        if spec.events.len() >= 2 {
            let cur = rng.gen_range(0..spec.events.len());
            if cur > 0 {
                let cutoff = multi_event_cutoff(
                    spec.events[cur - 1].end_s,
                    spec.events[cur].start_s,
                    &mut rng,
                )?;
                let local = cutoff.saturating_sub(win_start).min(win_len) as usize;
                rec = apply_inactive_override(&rec, local)?;
            }
        }

        let mask: Vec<bool> = rec
            .masked_seq
            .tokens()
            .iter()
            .map(|t| t.is_masked())
            .collect();
        if !mask.iter().any(|&m| m) {
            curve.push((step, 0.0));
            continue;
        }

        let window = ActivationWindow::from_sequence(
            rec.masked_seq.clone(),
            win_len as usize,
            Some(win_start + win_len - 1),
        )?;
        let feats = &sample.features[win_start as usize..(win_start + win_len) as usize];
        let ctx = PredictorContext::new(spec.query_id, feats, &window)?;
        let (loss, mut grad) = model.loss_and_grad(&ctx, &target, &mask, rec.t)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("non-finite loss {loss}"),
            });
        }
        let lr = lr_at(opts.lr, opts.lr_schedule, step, opts.steps);
        sgd_step(model, &mut grad, lr, opts.clip_norm);
        curve.push((step, loss));
    }
    Ok(curve)
}
