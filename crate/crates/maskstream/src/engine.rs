//! The online two-stage loop: per-frame window advance, selective
//! re-masking, K-step progressive denoising, trigger issuance and
//! context bookkeeping.
//!
//! The engine is a sequential state machine: one owner, frames ingested in
//! arrival order. Given the same stream, config and denoiser it is fully
//! deterministic. Independent streams can run on separate threads with no
//! shared mutable state.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::activation::{
    check_trigger, new_window, ActivationToken, ActivationWindow, TriggerDecision,
};
use crate::denoiser::{Denoiser, PredictorContext, ProbVector};
use crate::{Error, Result};

/// How many positions each denoising step reveals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevealSchedule {
    /// `k = ceil(N_init / K)` highest-confidence positions per step, fixed
    /// from the post-retention masked count; the final step takes any
    /// remainder.
    UniformCount,
    /// Reveal `ceil(remaining / steps_left)` per step — the fraction
    /// `(t_k - t_{k-1}) / t_k` of currently masked positions under the
    /// uniform noise grid `t_k = k/K`.
    FractionOfRemaining,
}

/// What the retention predictor pass conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionView {
    /// Evaluate carried decisions with the shifted window as-is. A predictor
    /// that leans on visible tokens can self-confirm its own carried values,
    /// so low-confidence revision may never fire.
    Literal,
    /// Evaluate against a fully masked view of the shifted window: retention
    /// asks whether each carried value can be re-derived from the current
    /// evidence alone.
    Masked,
}

/// Which carried-forward decisions return to the masked state each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemaskMode {
    /// Confidence-based retention: re-mask carried decisions whose
    /// probability falls to `tau` or below.
    Selective,
    /// Only the newly appended slot is masked; prior decisions are frozen.
    /// Behaviorally a point-wise autoregressive decision on the newest slot.
    LastOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// W — window capacity in one-second positions.
    pub window_capacity: usize,
    /// K — denoising steps per frame.
    pub denoise_steps: usize,
    /// Retention threshold for carried-forward decisions.
    pub tau: f64,
    /// Minimum consecutive-Active run (ending at the newest position)
    /// required to fire.
    pub gamma: usize,
    /// Cached feature budget; exceeding it triggers truncation.
    pub max_context: usize,
    /// Frames retained after a cap event.
    pub retain_on_cap: usize,
    pub feature_dim: usize,
    pub schedule: RevealSchedule,
    pub remask: RemaskMode,
    pub retention_view: RetentionView,
    /// Ablation flag: when set, a trigger only logs — the window and cache
    /// are kept instead of being cleared.
    pub keep_window_on_trigger: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            window_capacity: 256,
            denoise_steps: 8,
            tau: 0.75,
            gamma: 1,
            max_context: 256,
            retain_on_cap: 128,
            feature_dim: 8,
            schedule: RevealSchedule::UniformCount,
            remask: RemaskMode::Selective,
            retention_view: RetentionView::Masked,
            keep_window_on_trigger: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.denoise_steps == 0 {
            return Err(Error::Config("denoise_steps must be >= 1".into()));
        }
        if self.gamma == 0 || self.gamma > self.window_capacity {
            return Err(Error::Config(format!(
                "gamma {} outside [1, {}]",
                self.gamma, self.window_capacity
            )));
        }
        if self.retain_on_cap == 0 || self.retain_on_cap >= self.max_context {
            return Err(Error::Config(format!(
                "retain_on_cap {} must be in [1, {})",
                self.retain_on_cap, self.max_context
            )));
        }
        if self.window_capacity == 0 || self.feature_dim == 0 {
            return Err(Error::Config("window_capacity and feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One fired trigger, as logged to the context history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub time_s: u64,
    /// Resolved window content at firing time, as a `{0,1}` string.
    pub window: String,
    pub span_len: usize,
}

/// One denoising step: which positions were unmasked at what confidence, and
/// what stayed masked.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTraceEntry {
    pub step: usize,
    /// `(position, confidence)` in commit order.
    pub unmasked: Vec<(usize, f64)>,
    /// Positions still masked after this step, with their confidences.
    pub remaining: Vec<(usize, f64)>,
}

/// Full per-frame observability record.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub n_init: usize,
    /// Carried positions returned to masked by the retention check.
    pub remask_set: Vec<usize>,
    pub steps: Vec<StepTraceEntry>,
    /// Wall time of the retention predictor pass, when one ran.
    pub retention_secs: Option<f64>,
    /// Wall time of each denoising predictor pass.
    pub step_secs: Vec<f64>,
    /// Whether this frame hit the context cap.
    pub capped: bool,
}

/// Live engine state for one stream.
#[derive(Clone, Debug)]
pub struct StreamState {
    config: EngineConfig,
    query_id: u32,
    cache: Vec<Vec<f64>>,
    window: ActivationWindow,
    context_log: Vec<TriggerRecord>,
    now: Option<u64>,
    armed: bool,
    decisions: Vec<bool>,
}

impl StreamState {
    pub fn new(config: EngineConfig, query_id: u32) -> Result<Self> {
        config.validate()?;
        let window = new_window(config.window_capacity)?;
        Ok(StreamState {
            config,
            query_id,
            cache: Vec::new(),
            window,
            context_log: Vec::new(),
            now: None,
            armed: true,
            decisions: Vec::new(),
        })
    }

    /// Query arrival: set the active query and cold-start the episode (cache
    /// and window cleared, trigger re-armed).
    pub fn set_query(&mut self, query_id: u32) {
        self.query_id = query_id;
        self.cache.clear();
        self.window = new_window(self.config.window_capacity).expect("validated capacity");
        self.armed = true;
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn query_id(&self) -> u32 {
        self.query_id
    }

    pub fn window(&self) -> &ActivationWindow {
        &self.window
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn context_log(&self) -> &[TriggerRecord] {
        &self.context_log
    }

    pub fn now(&self) -> Option<u64> {
        self.now
    }

    /// Committed decision per stream second: the value each position held
    /// when it was evicted (or holds now). Index = second.
    pub fn decisions(&self) -> &[bool] {
        &self.decisions
    }

    pub fn trigger_times(&self) -> Vec<u64> {
        self.context_log.iter().map(|r| r.time_s).collect()
    }
}

/// Confidence-based retention: carried-forward resolved positions keep their
/// value when the probability assigned to it exceeds `tau`, otherwise they
/// are re-masked. Returns the updated window and `N_init`, the masked count
/// entering the denoising stage.
///
/// `tau = 0` inherits everything unconditionally; `tau = 1` rebuilds the
/// window from scratch.
pub fn selective_remask(
    window: &ActivationWindow,
    probs: &ProbVector,
    tau: f64,
) -> (ActivationWindow, usize) {
    let mut out = window.clone();
    for j in 0..window.len() {
        match window.token(j).as_bool() {
            Some(value) => {
                let p_v = probs.prob_of(j, value);
                if tau == 0.0 || p_v > tau {
                    out.set_prob(j, p_v);
                } else {
                    out.remask(j, probs.values()[j]);
                }
            }
            None => out.set_prob(j, probs.values()[j]),
        }
    }
    let n_init = out.seq().masked_count();
    (out, n_init)
}

/// Resolve every masked position over at most `K` predictor passes,
/// committing the highest-confidence positions first (ties to the lowest
/// index; value ties commit Active).
pub fn denoise_k_steps<D: Denoiser + ?Sized>(
    window: &ActivationWindow,
    query_id: u32,
    features: &[Vec<f64>],
    denoiser: &D,
    k_steps: usize,
    schedule: RevealSchedule,
) -> Result<(ActivationWindow, Vec<StepTraceEntry>, Vec<f64>)> {
    let mut window = window.clone();
    let n_init = window.seq().masked_count();
    let per_step = n_init.div_ceil(k_steps);
    let mut entries = Vec::new();
    let mut times = Vec::new();

    for step in 1..=k_steps {
        let masked = window.seq().masked_positions();
        if masked.is_empty() {
            break;
        }
        let ctx = PredictorContext::new(query_id, features, &window)?;
        let started = Instant::now();
        let probs = denoiser.predict(&ctx)?;
        times.push(started.elapsed().as_secs_f64());

        let count = if step == k_steps {
            masked.len()
        } else {
            match schedule {
                RevealSchedule::UniformCount => per_step.min(masked.len()),
                RevealSchedule::FractionOfRemaining => {
                    let steps_left = k_steps - step + 1;
                    masked.len().div_ceil(steps_left)
                }
            }
        };

        let mut ranked: Vec<(usize, f64)> =
            masked.iter().map(|&j| (j, probs.confidence(j))).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let mut unmasked = Vec::with_capacity(count);
        for &(j, conf) in ranked.iter().take(count) {
            let p = probs.values()[j];
            let value = p >= 0.5;
            window.commit(j, value, probs.prob_of(j, value));
            unmasked.push((j, conf));
        }
        let remaining: Vec<(usize, f64)> = ranked[count..].to_vec();
        // refresh stored probabilities on every evaluated position
        for &(j, _) in &remaining {
            window.set_prob(j, probs.values()[j]);
        }
        for j in 0..window.len() {
            if let Some(v) = window.token(j).as_bool() {
                if !unmasked.iter().any(|&(u, _)| u == j) {
                    window.set_prob(j, probs.prob_of(j, v));
                }
            }
        }
        entries.push(StepTraceEntry { step, unmasked, remaining });
    }
    debug_assert!(window.is_fully_resolved());
    Ok((window, entries, times))
}

/// Trigger bookkeeping: log the fired trigger and restart the visual
/// accumulation (and window) from the current second.
pub fn handle_trigger(state: &mut StreamState, decision: &TriggerDecision) -> Result<()> {
    if !decision.fired {
        return Err(Error::ProtocolViolation(
            "handle_trigger called without a fired trigger".into(),
        ));
    }
    if state.now != Some(decision.time_s) {
        return Err(Error::ProtocolViolation(format!(
            "trigger at {} does not match current second {:?}",
            decision.time_s, state.now
        )));
    }
    state.context_log.push(TriggerRecord {
        time_s: decision.time_s,
        window: state.window.seq().to_string(),
        span_len: decision.span_len,
    });
    state.armed = false;
    if !state.config.keep_window_on_trigger {
        state.cache.clear();
        state.window = new_window(state.config.window_capacity).expect("validated capacity");
    }
    Ok(())
}

/// Enforce the cached-feature budget: past `max_context` frames, keep only
/// the most recent `retain_on_cap` and rebuild the window over the surviving
/// suffix, fully masked for the next denoising pass. Returns whether a cap
/// event happened.
pub fn enforce_context_cap(state: &mut StreamState) -> Result<bool> {
    if state.cache.len() <= state.config.max_context {
        return Ok(false);
    }
    let retain = state.config.retain_on_cap;
    let drop = state.cache.len() - retain;
    state.cache.drain(..drop);
    let len = retain.min(state.config.window_capacity);
    let anchor = state
        .now
        .ok_or_else(|| Error::ProtocolViolation("cap with no frames ingested".into()))?;
    state.window = ActivationWindow::fully_masked(state.config.window_capacity, len, anchor)?;
    Ok(true)
}

/// Advance one second: cache the frame, slide the window, re-mask, denoise,
/// check the trigger, and fire downstream bookkeeping when armed.
///
/// A fired trigger disarms the engine until the newest position next
/// resolves Inactive, so one contiguous active span produces exactly one
/// trigger.
pub fn ingest_frame<D: Denoiser + ?Sized>(
    state: &mut StreamState,
    feature: Vec<f64>,
    denoiser: &D,
) -> Result<(TriggerDecision, StepTrace)> {
    if feature.len() != state.config.feature_dim {
        return Err(Error::InvalidArgument(format!(
            "feature dimension {} does not match config {}",
            feature.len(),
            state.config.feature_dim
        )));
    }
    let now = match state.now {
        Some(t) => t + 1,
        None => 0,
    };
    state.now = Some(now);
    state.cache.push(feature);
    let capped = enforce_context_cap(state)?;
    if !capped {
        state.window = state.window.shift_append_at(now);
    }
    state.decisions.resize(now as usize + 1, false);

    // stage 1: retention check over carried-forward decisions
    let has_resolved = state
        .window
        .seq()
        .tokens()
        .iter()
        .any(|t| !t.is_masked());
    let mut retention_secs = None;
    let mut remask_set = Vec::new();
    let n_init;
    if state.config.remask == RemaskMode::Selective && has_resolved {
        let view = match state.config.retention_view {
            RetentionView::Literal => state.window.clone(),
            RetentionView::Masked => ActivationWindow::fully_masked(
                state.window.capacity(),
                state.window.len(),
                state.window.anchor().expect("anchored after shift"),
            )?,
        };
        let ctx = PredictorContext::new(state.query_id, &state.cache, &view)?;
        let started = Instant::now();
        let probs = denoiser.predict(&ctx)?;
        retention_secs = Some(started.elapsed().as_secs_f64());
        let before = state.window.clone();
        let (window, n) = selective_remask(&state.window, &probs, state.config.tau);
        remask_set = (0..window.len())
            .filter(|&j| !before.token(j).is_masked() && window.token(j).is_masked())
            .collect();
        state.window = window;
        n_init = n;
    } else {
        n_init = state.window.seq().masked_count();
    }

    // stage 2: progressive denoising
    let (window, steps, step_secs) = denoise_k_steps(
        &state.window,
        state.query_id,
        &state.cache,
        denoiser,
        state.config.denoise_steps,
        state.config.schedule,
    )?;
    state.window = window;

    // commit the resolved values into the per-second decision history
    for j in 0..state.window.len() {
        let second = state.window.second_of(j).expect("anchored window");
        let value = state.window.token(j).as_bool().expect("resolved window");
        state.decisions[second as usize] = value;
    }

    // re-arm as soon as the newest position resolves Inactive
    if state.window.token(state.window.len() - 1) == ActivationToken::Inactive {
        state.armed = true;
    }
    let raw = check_trigger(&state.window, state.config.gamma)?;
    let fired = raw.fired && state.armed;
    let decision = TriggerDecision { fired, ..raw };
    if fired {
        handle_trigger(state, &decision)?;
    }

    let trace = StepTrace {
        n_init,
        remask_set,
        steps,
        retention_secs,
        step_secs,
        capped,
    };
    Ok((decision, trace))
}
