//! Protocol-testing double for the mask predictor: emits probabilities
//! blended between the ground truth and a coin flip.
//!
//! With flip-noise `e` at a position whose truth is `v`, the emitted
//! probability-of-Active is `1-e` when `v` is active and `e` otherwise, i.e.
//! `p = (1-2e)·truth + e`, which reaches exactly 0.5 (fully uninformative)
//! at `e = 0.5`. Positions within `boundary_blur` seconds of a truth
//! transition get extra noise, ramping to a full coin flip at the transition
//! itself.

use crate::denoiser::{Denoiser, PredictorContext, ProbVector};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    truth: Vec<bool>,
    epsilon: f64,
    boundary_blur: usize,
    transitions: Vec<usize>,
}

impl OracleDenoiser {
    /// `truth[s]` is the clean activation at stream second `s`; seconds
    /// beyond the supplied range read as inactive.
    pub fn new(truth: Vec<bool>, epsilon: f64, boundary_blur: usize) -> Result<Self> {
        if !(0.0..=0.5).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!(
                "oracle noise {epsilon} outside [0, 0.5]"
            )));
        }
        let transitions = (0..truth.len().saturating_sub(1))
            .filter(|&s| truth[s] != truth[s + 1])
            .collect();
        Ok(OracleDenoiser { truth, epsilon, boundary_blur, transitions })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn truth_at(&self, second: u64) -> bool {
        self.truth.get(second as usize).copied().unwrap_or(false)
    }

    fn noise_at(&self, second: u64) -> f64 {
        if self.boundary_blur == 0 {
            return self.epsilon;
        }
        let x = second as usize;
        let dist = self
            .transitions
            .iter()
            .map(|&t| x.abs_diff(t).min(x.abs_diff(t + 1)))
            .min();
        match dist {
            Some(d) if d < self.boundary_blur => {
                let frac = (self.boundary_blur - d) as f64 / self.boundary_blur as f64;
                self.epsilon + (0.5 - self.epsilon) * frac
            }
            _ => self.epsilon,
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, ctx: &PredictorContext) -> Result<ProbVector> {
        let window = ctx.window;
        let len = window.len();
        if len == 0 {
            return ProbVector::new(Vec::new());
        }
        let anchor = window
            .anchor()
            .ok_or_else(|| Error::InvalidArgument("oracle needs an anchored window".into()))?;
        let p = (0..len)
            .map(|j| {
                let second = anchor - (len - 1 - j) as u64;
                let e = self.noise_at(second);
                if self.truth_at(second) {
                    1.0 - e
                } else {
                    e
                }
            })
            .collect();
        ProbVector::new(p)
    }
}
