//! Point-wise autoregressive activation baseline: the same trunk as the mask
//! predictor, but a 1-logit score head evaluated on the newest frame only,
//! thresholded at a fixed 0.35. Decisions at time T depend only on frames
//! <= T and are never revised — the contrast case for the denoising engine.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationSequence, EventSpan, TriggerDecision};
use crate::denoiser::{
    lr_at, trunk_backward, trunk_forward, LrSchedule, ModelConfig, NeuralDenoiser, Slot, Tensor,
    TrunkParams, TrunkTape,
};
use crate::engine::TriggerRecord;
use crate::streamgen::{sample_training_window, StreamSample};
use crate::{Error, Result};

/// Fixed decision threshold; firing requires a score strictly above it.
pub const AR_THRESHOLD: f64 = 0.35;

/// Label-fraction sampler: each training sample relabels only the last
/// `P`% of every event span as active, with `P ~ U[0, p_max]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ArLabeler {
    pub p_max: f64,
}

impl Default for ArLabeler {
    fn default() -> Self {
        ArLabeler { p_max: 50.0 }
    }
}

impl ArLabeler {
    pub fn new(p_max: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&p_max) {
            return Err(Error::InvalidArgument(format!(
                "p_max {p_max} outside [0, 100]"
            )));
        }
        Ok(ArLabeler { p_max })
    }

    pub fn draw_p<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.gen_range(0.0..=self.p_max)
    }
}

/// Full-length labels with only the trailing `ceil(P% · span_len)` positions
/// of the span active; everything outside the span is inactive.
pub fn label_last_p(span: &EventSpan, p_percent: f64, length: u64) -> Result<ActivationSequence> {
    if !(0.0..=100.0).contains(&p_percent) {
        return Err(Error::InvalidArgument(format!(
            "percentage {p_percent} outside [0, 100]"
        )));
    }
    if span.end_s >= length {
        return Err(Error::InvalidArgument(format!(
            "span ({}, {}) outside [0, {length})",
            span.start_s, span.end_s
        )));
    }
    let span_len = span.len_s();
    let active = ((p_percent / 100.0) * span_len as f64).ceil() as u64;
    let first_active = span.end_s + 1 - active.min(span_len);
    let bits: Vec<bool> = (0..length)
        .map(|s| active > 0 && s >= first_active && s <= span.end_s)
        .collect();
    Ok(ActivationSequence::from_bools(&bits))
}

/// Anything that scores the newest frame of a stream in `[0, 1]`.
pub trait FrameScorer: Send + Sync {
    fn score(&self, query_id: u32, features: &[Vec<f64>]) -> Result<f64>;
}

/// Score-head model sharing the mask predictor's trunk shape: a learned
/// per-frame score slot appended after the features, classified by one
/// logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub cfg: ModelConfig,
    pub trunk: TrunkParams,
    pub act_emb: Vec<f64>,
    pub score_w: Vec<f64>,
    pub score_b: f64,
    /// Most recent frames consumed per score; matches the training window
    /// cap so streaming-time contexts look like training-time ones.
    pub max_frames: usize,
}

#[derive(Serialize, Deserialize)]
struct ArCheckpointFile {
    version: u32,
    kind: String,
    model: ArModel,
}

impl ArModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let trunk = TrunkParams::init(&cfg, &mut rng);
        let h = cfg.hidden_dim;
        let emb_std = 0.5;
        let w_std = 1.0 / (h as f64).sqrt();
        let act_emb = Tensor::randn(1, h, emb_std, &mut rng).data;
        let score_w = Tensor::randn(1, h, w_std, &mut rng).data;
        Ok(ArModel { cfg, trunk, act_emb, score_w, score_b: 0.0, max_frames: 256 })
    }

    /// Build a shape-matched baseline from a trained mask predictor's
    /// configuration (fresh parameters, same trunk dimensions).
    pub fn matched_to(denoiser: &NeuralDenoiser, seed: u64) -> Result<Self> {
        ArModel::new(denoiser.cfg, seed)
    }

    fn slots(features_len: usize, query_id: u32) -> Vec<Slot> {
        let mut slots = Vec::with_capacity(features_len + 2);
        slots.push(Slot::Query(query_id));
        for i in 0..features_len {
            slots.push(Slot::Feature { index: i, age: features_len - 1 - i });
        }
        slots.push(Slot::Act { age: 0 });
        slots
    }

    fn check_features(&self, features: &[Vec<f64>]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("no frames to score".into()));
        }
        for f in features {
            if f.len() != self.cfg.feature_dim {
                return Err(Error::InvalidArgument(format!(
                    "feature dimension {} does not match model dimension {}",
                    f.len(),
                    self.cfg.feature_dim
                )));
            }
        }
        Ok(())
    }

    fn logit(&self, query_id: u32, features: &[Vec<f64>]) -> Result<(Vec<Slot>, TrunkTape, f64)> {
        self.check_features(features)?;
        // consume at most the trained context budget of trailing frames
        let keep = features.len().min(self.max_frames.max(1));
        let features = &features[features.len() - keep..];
        let slots = Self::slots(features.len(), query_id);
        let tape = trunk_forward(
            &self.cfg,
            &self.trunk,
            &slots,
            features,
            Some(&self.act_emb),
        );
        let h = self.cfg.hidden_dim;
        let act_row = &tape.nf[(slots.len() - 1) * h..slots.len() * h];
        let mut logit = self.score_b;
        for (&x, &w) in act_row.iter().zip(&self.score_w) {
            logit += x * w;
        }
        Ok((slots, tape, logit))
    }

    /// Binary cross-entropy on the newest frame's label, with gradients.
    fn bce_and_grad(
        &self,
        query_id: u32,
        features: &[Vec<f64>],
        label: bool,
    ) -> Result<(f64, ArGrad)> {
        let (slots, tape, logit) = self.logit(query_id, features)?;
        let h = self.cfg.hidden_dim;
        let s = 1.0 / (1.0 + (-logit).exp());
        let y = if label { 1.0 } else { 0.0 };
        // stable bce: max(l,0) - l*y + ln(1+e^{-|l|})
        let loss = logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln();
        let dlogit = s - y;

        let act_idx = slots.len() - 1;
        let act_row = &tape.nf[act_idx * h..(act_idx + 1) * h];
        let g_score_w: Vec<f64> = act_row.iter().map(|&x| x * dlogit).collect();
        let mut d_nf = vec![0.0; slots.len() * h];
        for (r, &w) in self.score_w.iter().enumerate() {
            d_nf[act_idx * h + r] = dlogit * w;
        }
        let out = trunk_backward(
            &self.cfg,
            &self.trunk,
            &slots,
            features,
            &tape,
            &d_nf,
        );
        Ok((
            loss,
            ArGrad {
                trunk: out.grad,
                act_emb: out.act_emb_grad,
                score_w: g_score_w,
                score_b: dlogit,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(
            BufWriter::new(file),
            &ArCheckpointFile { version: 1, kind: "ar".into(), model: self.clone() },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let ckpt: ArCheckpointFile = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.version != 1 || ckpt.kind != "ar" {
            return Err(Error::Config(format!(
                "not an ar checkpoint (version {}, kind {:?})",
                ckpt.version, ckpt.kind
            )));
        }
        ckpt.model.cfg.validate()?;
        Ok(ckpt.model)
    }
}

impl FrameScorer for ArModel {
    fn score(&self, query_id: u32, features: &[Vec<f64>]) -> Result<f64> {
        let (_, _, logit) = self.logit(query_id, features)?;
        Ok(1.0 / (1.0 + (-logit).exp()))
    }
}

struct ArGrad {
    trunk: TrunkParams,
    act_emb: Vec<f64>,
    score_w: Vec<f64>,
    score_b: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ArTrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub clip_norm: f64,
    pub window_max: u64,
    pub p_max: f64,
    pub seed: u64,
}

impl Default for ArTrainOptions {
    fn default() -> Self {
        ArTrainOptions {
            steps: 2000,
            lr: 0.05,
            lr_schedule: LrSchedule::Cosine,
            clip_norm: 1.0,
            window_max: 256,
            p_max: 50.0,
            seed: 0,
        }
    }
}

/// Train the score head with unweighted per-frame BCE: each step draws a
/// window, relabels events to their last-P% (`P ~ U[0, p_max]`), and fits
/// the newest frame's label.
pub fn train_ar(
    model: &mut ArModel,
    corpus: &[StreamSample],
    opts: &ArTrainOptions,
) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let labeler = ArLabeler::new(opts.p_max)?;
    model.max_frames = opts.window_max as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let sample = &corpus[rng.gen_range(0..corpus.len())];
        let spec = &sample.spec;
        let (win_start, win_len) = {
            let (mut start, mut len) =
                sample_training_window(spec.length_s, opts.window_max, &mut rng);
            // balance the scored frame: half the draws anchor the window end
            // inside an event, otherwise positives are too rare to learn from
            if !spec.events.is_empty() && rng.gen::<bool>() {
                let e = &spec.events[rng.gen_range(0..spec.events.len())];
                let newest = rng.gen_range(e.start_s..=e.end_s);
                start = (newest + 1).saturating_sub(len);
                len = newest + 1 - start;
            }
            (start, len)
        };
        let p = labeler.draw_p(&mut rng);
        let newest = win_start + win_len - 1;
        let mut label = false;
        for e in &spec.events {
            if e.contains(newest) {
                let labels = label_last_p(e, p, spec.length_s)?;
                label = labels.get(newest as usize).and_then(|t| t.as_bool()).unwrap_or(false);
            }
        }
        let feats = &sample.features[win_start as usize..(win_start + win_len) as usize];
        let (loss, mut grad) = model.bce_and_grad(spec.query_id, feats, label)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("non-finite loss {loss}"),
            });
        }
        let lr = lr_at(opts.lr, opts.lr_schedule, step, opts.steps);
        ar_sgd_step(model, &mut grad, lr, opts.clip_norm);
        curve.push((step, loss));
    }
    Ok(curve)
}

fn ar_sgd_step(model: &mut ArModel, grad: &mut ArGrad, lr: f64, clip_norm: f64) {
    let mut sq = 0.0;
    for s in grad.trunk.slices_mut() {
        for &g in s.iter() {
            sq += g * g;
        }
    }
    for &g in &grad.act_emb {
        sq += g * g;
    }
    for &g in &grad.score_w {
        sq += g * g;
    }
    sq += grad.score_b * grad.score_b;
    let norm = sq.sqrt();
    let scale = if norm > clip_norm && norm > 0.0 { clip_norm / norm } else { 1.0 };
    let step = lr * scale;
    for (p, g) in model.trunk.slices_mut().into_iter().zip(grad.trunk.slices_mut()) {
        for (pv, &gv) in p.iter_mut().zip(g.iter()) {
            *pv -= step * gv;
        }
    }
    for (pv, &gv) in model.act_emb.iter_mut().zip(&grad.act_emb) {
        *pv -= step * gv;
    }
    for (pv, &gv) in model.score_w.iter_mut().zip(&grad.score_w) {
        *pv -= step * gv;
    }
    model.score_b -= step * grad.score_b;
}

/// Live state of the baseline over one stream: no window, just the feature
/// cache and an append-only decision history.
#[derive(Clone, Debug)]
pub struct ArStreamState {
    max_context: usize,
    retain_on_cap: usize,
    feature_dim: usize,
    query_id: u32,
    cache: Vec<Vec<f64>>,
    now: Option<u64>,
    decisions: Vec<bool>,
    scores: Vec<f64>,
    context_log: Vec<TriggerRecord>,
}

impl ArStreamState {
    pub fn new(max_context: usize, retain_on_cap: usize, feature_dim: usize, query_id: u32) -> Result<Self> {
        if retain_on_cap == 0 || retain_on_cap >= max_context {
            return Err(Error::Config(format!(
                "retain_on_cap {retain_on_cap} must be in [1, {max_context})"
            )));
        }
        Ok(ArStreamState {
            max_context,
            retain_on_cap,
            feature_dim,
            query_id,
            cache: Vec::new(),
            now: None,
            decisions: Vec::new(),
            scores: Vec::new(),
            context_log: Vec::new(),
        })
    }

    pub fn decisions(&self) -> &[bool] {
        &self.decisions
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn context_log(&self) -> &[TriggerRecord] {
        &self.context_log
    }

    pub fn trigger_times(&self) -> Vec<u64> {
        self.context_log.iter().map(|r| r.time_s).collect()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

/// One point-wise step: score the newest frame, fire iff the score is
/// strictly above the fixed threshold, and on fire run the same bookkeeping
/// as the denoising engine (log + clear the accumulated context).
pub fn ar_step<S: FrameScorer + ?Sized>(
    state: &mut ArStreamState,
    feature: Vec<f64>,
    scorer: &S,
) -> Result<(TriggerDecision, f64)> {
    if feature.len() != state.feature_dim {
        return Err(Error::InvalidArgument(format!(
            "feature dimension {} does not match config {}",
            feature.len(),
            state.feature_dim
        )));
    }
    let now = match state.now {
        Some(t) => t + 1,
        None => 0,
    };
    state.now = Some(now);
    state.cache.push(feature);
    if state.cache.len() > state.max_context {
        let drop = state.cache.len() - state.retain_on_cap;
        state.cache.drain(..drop);
    }
    let score = scorer.score(state.query_id, &state.cache)?;
    let fired = score > AR_THRESHOLD;
    state.decisions.push(fired);
    state.scores.push(score);
    let span_len = state.decisions.iter().rev().take_while(|&&d| d).count();
    let decision = TriggerDecision { fired, time_s: now, span_len };
    if fired {
        let window: String = state
            .decisions
            .iter()
            .rev()
            .take(span_len)
            .map(|&d| if d { '1' } else { '0' })
            .collect();
        state.context_log.push(TriggerRecord { time_s: now, window, span_len });
        state.cache.clear();
    }
    Ok((decision, score))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: u64, e: u64) -> EventSpan {
        EventSpan { start_s: s, end_s: e, label: 0 }
    }

    struct FixedScores(Vec<f64>);
    impl FrameScorer for FixedScores {
        fn score(&self, _q: u32, features: &[Vec<f64>]) -> Result<f64> {
            // index by how many frames arrived so far is not recoverable from
            // the cache alone (it clears on fire), so encode time in the
            // feature value
            let t = features.last().unwrap()[0] as usize;
            Ok(self.0[t])
        }
    }

    fn drive(scores: Vec<f64>) -> ArStreamState {
        let scorer = FixedScores(scores.clone());
        let mut state = ArStreamState::new(256, 128, 1, 0).unwrap();
        for t in 0..scores.len() {
            ar_step(&mut state, vec![t as f64], &scorer).unwrap();
        }
        state
    }

    #[test]
    fn label_last_p_examples() {
        let labels = label_last_p(&span(0, 9), 50.0, 10).unwrap();
        assert_eq!(labels.to_string(), "0000011111");

        let labels = label_last_p(&span(0, 9), 0.0, 10).unwrap();
        assert_eq!(labels.to_string(), "0000000000");

        // span length 3, P = 50: ceil(1.5) = 2 active
        let labels = label_last_p(&span(2, 4), 50.0, 6).unwrap();
        assert_eq!(labels.to_string(), "000110");

        assert!(label_last_p(&span(2, 8), 50.0, 6).is_err());
        assert!(label_last_p(&span(0, 2), 120.0, 6).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let state = drive(vec![0.36, 0.35, 0.34]);
        assert_eq!(state.decisions(), &[true, false, false]);
        assert_eq!(state.trigger_times(), vec![0]);
    }

    #[test]
    fn oracle_scores_trigger_exactly_inside_labeled_regions() {
        let labels = label_last_p(&span(3, 8), 50.0, 12).unwrap();
        let scores: Vec<f64> = labels
            .as_bools()
            .unwrap()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        let state = drive(scores);
        assert_eq!(state.trigger_times(), vec![6, 7, 8]);
        assert_eq!(
            state.decisions(),
            labels.as_bools().unwrap().as_slice()
        );
    }

    #[test]
    fn decisions_never_revise_the_past() {
        let state = drive(vec![0.9, 0.1, 0.8, 0.2]);
        // prefix of decisions equals decisions of the prefix
        let prefix = drive(vec![0.9, 0.1]);
        assert_eq!(&state.decisions()[..2], prefix.decisions());
    }

    #[test]
    fn cache_cap_matches_engine_rule() {
        let scorer = FixedScores(vec![0.0; 300]);
        let mut state = ArStreamState::new(256, 128, 1, 0).unwrap();
        let mut max_seen = 0;
        for t in 0..300 {
            ar_step(&mut state, vec![t as f64], &scorer).unwrap();
            max_seen = max_seen.max(state.cache_len());
        }
        assert!(max_seen <= 256);
        assert_eq!(state.cache_len(), 128 + (300 - 257));
    }

    #[test]
    fn ar_model_scores_deterministically() {
        let cfg = ModelConfig {
            feature_dim: 3,
            hidden_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            n_queries: 2,
        };
        let model = ArModel::new(cfg, 4).unwrap();
        let feats = vec![vec![0.1, -0.2, 0.4], vec![0.5, 0.0, -0.3]];
        let a = model.score(0, &feats).unwrap();
        let b = model.score(0, &feats).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ar_training_learns_a_separable_stream() {
        use crate::streamgen::{generate_sample, StreamSpec};
        let spec = StreamSpec::new(
            0,
            30,
            vec![span(10, 19)],
            0,
            3,
            f64::INFINITY,
            0,
            vec![],
            3,
        )
        .unwrap();
        let corpus = vec![generate_sample(&spec).unwrap()];
        let cfg = ModelConfig {
            feature_dim: 3,
            hidden_dim: 12,
            n_blocks: 1,
            n_heads: 2,
            n_queries: 2,
        };
        let mut model = ArModel::new(cfg, 8).unwrap();
        let opts = ArTrainOptions {
            steps: 2500,
            lr: 0.2,
            window_max: 30,
            seed: 2,
            ..ArTrainOptions::default()
        };
        let curve = train_ar(&mut model, &corpus, &opts).unwrap();
        assert!(curve.iter().all(|(_, l)| l.is_finite()));
        // the trained head must separate the end of the event (labeled
        // active under any P) from frames before it begins
        let feats = &corpus[0].features;
        let in_event = model.score(0, &feats[..20]).unwrap();
        let outside = model.score(0, &feats[..6]).unwrap();
        assert!(
            in_event > outside + 0.2,
            "no discrimination: in-event {in_event} vs outside {outside}"
        );
    }

    #[test]
    fn ar_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha20Rng;
        let cfg = ModelConfig {
            feature_dim: 3,
            hidden_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            n_queries: 2,
        };
        for seed in [5u64, 6] {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let feats: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let label: bool = rng.gen();
            let model = ArModel::new(cfg, seed + 10).unwrap();
            let (_, grad) = model.bce_and_grad(1, &feats, label).unwrap();
            let mut analytic: Vec<f64> = Vec::new();
            {
                let mut g = grad;
                for sl in g.trunk.slices_mut() {
                    analytic.extend_from_slice(sl);
                }
                analytic.extend_from_slice(&g.act_emb);
                analytic.extend_from_slice(&g.score_w);
                analytic.push(g.score_b);
            }
            let delta = 1e-5;
            let mut flat = 0usize;
            let mut max_rel: f64 = 0.0;
            let n_trunk_slices = model.clone().trunk.slices_mut().len();
            let mut check = |plus: ArModel, minus: ArModel, a: f64| {
                let (lp, _) = plus.bce_and_grad(1, &feats, label).unwrap();
                let (lm, _) = minus.bce_and_grad(1, &feats, label).unwrap();
                let numeric = (lp - lm) / (2.0 * delta);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                if rel > max_rel {
                    max_rel = rel;
                }
            };
            for si in 0..n_trunk_slices {
                let len = model.clone().trunk.slices_mut()[si].len();
                for pi in 0..len {
                    let mut plus = model.clone();
                    plus.trunk.slices_mut()[si][pi] += delta;
                    let mut minus = model.clone();
                    minus.trunk.slices_mut()[si][pi] -= delta;
                    check(plus, minus, analytic[flat]);
                    flat += 1;
                }
            }
            for pi in 0..model.act_emb.len() {
                let mut plus = model.clone();
                plus.act_emb[pi] += delta;
                let mut minus = model.clone();
                minus.act_emb[pi] -= delta;
                check(plus, minus, analytic[flat]);
                flat += 1;
            }
            for pi in 0..model.score_w.len() {
                let mut plus = model.clone();
                plus.score_w[pi] += delta;
                let mut minus = model.clone();
                minus.score_w[pi] -= delta;
                check(plus, minus, analytic[flat]);
                flat += 1;
            }
            let mut plus = model.clone();
            plus.score_b += delta;
            let mut minus = model.clone();
            minus.score_b -= delta;
            check(plus, minus, analytic[flat]);
            flat += 1;
            assert_eq!(flat, analytic.len());
            assert!(max_rel < 1e-4, "seed {seed}: max relative error {max_rel}");
        }
    }

    #[test]
    fn ar_checkpoint_round_trips() {
        let cfg = ModelConfig {
            feature_dim: 3,
            hidden_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            n_queries: 2,
        };
        let model = ArModel::new(cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ar.json");
        model.save(&path).unwrap();
        assert_eq!(ArModel::load(&path).unwrap(), model);
    }
}
