//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured values. Criteria share a fixed synthetic suite (252 eval
//! streams, boundary ramp 3 s, matched training budget) and serialize on a
//! global gate so wall-clock budgets are measured without contention.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use maskstream::activation::ActivationSequence;
use maskstream::baseline::{train_ar, ArModel, ArTrainOptions};
use maskstream::corruption::{
    mask_boundary_span, mask_independent, mask_span_unmask, sample_training_corruption,
    MaskingStrategy, NoiseLevel,
};
use maskstream::denoiser::{
    masked_ce_loss, train, LrSchedule, MaskingMixture, ModelConfig,
    NeuralDenoiser, OracleDenoiser, PredictorContext, ProbVector, TrainOptions,
};
use maskstream::engine::{
    ingest_frame, EngineConfig, RemaskMode, RetentionView, RevealSchedule, StreamState,
};
use maskstream::harness::{
    eval_streams, permutation_mean_f1_band, report_from_results, run_ablation, AblationSetup,
    AblationSuite, EvalModelSpec, EvalOptions,
};
use maskstream::metrics::SegmentMatchConfig;
use maskstream::streamgen::{generate_corpus, GenConfig, StreamSample, TaskCorpus, TaskGenConfig};

// ---------------------------------------------------------------------------
// The fixed synthetic suite
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn suite_task(
    name: &str,
    count: u32,
    length_s: u64,
    n_events: u32,
    len_min: u64,
    len_max: u64,
    min_gap: u64,
    d_min: u32,
    d_max: u32,
) -> TaskGenConfig {
    TaskGenConfig {
        name: name.into(),
        count,
        length_s,
        n_events,
        event_len_min: len_min,
        event_len_max: len_max,
        min_gap,
        queries: vec![0, 1, 2, 3],
        distractors_min: d_min,
        distractors_max: d_max,
    }
}

fn suite_gen_train() -> GenConfig {
    GenConfig {
        feature_dim: 8,
        snr: 3.0,
        ramp_s: 3,
        seed: 1001,
        tasks: vec![
            suite_task("single", 50, 96, 1, 8, 16, 6, 0, 0),
            suite_task("multi", 50, 96, 3, 6, 12, 8, 0, 0),
            suite_task("distractor", 50, 96, 2, 8, 14, 8, 1, 2),
            // short streams teach the warm-up window lengths seen right
            // after episode resets
            suite_task("warmup", 40, 6, 1, 2, 4, 1, 0, 0),
        ],
    }
}

fn suite_gen_eval() -> GenConfig {
    GenConfig {
        feature_dim: 8,
        snr: 3.0,
        ramp_s: 3,
        seed: 2002,
        tasks: vec![
            suite_task("single", 84, 96, 1, 8, 16, 6, 0, 0),
            suite_task("multi", 84, 96, 3, 6, 12, 8, 0, 0),
            suite_task("distractor", 84, 96, 2, 8, 14, 8, 1, 2),
        ],
    }
}

fn suite_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        hidden_dim: 32,
        n_blocks: 2,
        n_heads: 4,
        n_queries: 4,
    }
}

fn suite_engine() -> EngineConfig {
    EngineConfig {
        window_capacity: 24,
        denoise_steps: 8,
        tau: 0.75,
        gamma: 3,
        max_context: 32,
        retain_on_cap: 16,
        feature_dim: 8,
        schedule: RevealSchedule::UniformCount,
        remask: RemaskMode::Selective,
        retention_view: RetentionView::Masked,
        keep_window_on_trigger: false,
    }
}

fn suite_train_opts() -> TrainOptions {
    TrainOptions {
        steps: 40_000,
        lr: 0.1,
        lr_schedule: LrSchedule::Cosine,
        clip_norm: 1.0,
        window_max: 24,
        margin: 2,
        mixture: MaskingMixture::Mixture,
        seed: 7,
    }
}

const MODEL_SEED: u64 = 3;

struct Fixture {
    train_streams: Vec<StreamSample>,
    eval: Vec<TaskCorpus>,
    mixture: NeuralDenoiser,
    ar: ArModel,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let train_streams: Vec<StreamSample> = generate_corpus(&suite_gen_train())
            .expect("train corpus")
            .into_iter()
            .flat_map(|t| t.samples)
            .collect();
        let eval = generate_corpus(&suite_gen_eval()).expect("eval corpus");
        let mut mixture = NeuralDenoiser::new(suite_model(), MODEL_SEED).expect("model");
        train(&mut mixture, &train_streams, &suite_train_opts()).expect("train mixture");
        let mut ar = ArModel::new(suite_model(), MODEL_SEED).expect("ar model");
        let ar_opts = ArTrainOptions {
            steps: 40_000,
            lr: 0.1,
            lr_schedule: LrSchedule::Cosine,
            clip_norm: 1.0,
            window_max: 24,
            p_max: 50.0,
            seed: 7,
        };
        train_ar(&mut ar, &train_streams, &ar_opts).expect("train ar");
        Fixture { train_streams, eval, mixture, ar }
    })
}

fn mean_f1_of(
    eval: &[TaskCorpus],
    engine: &EngineConfig,
    model: &EvalModelSpec,
    parallel: bool,
) -> f64 {
    let opts = EvalOptions { parallel, ..EvalOptions::default() };
    let results = eval_streams(eval, engine, model, &opts).expect("eval");
    report_from_results(&results, engine, &opts, false).mean_f1
}

// ---------------------------------------------------------------------------
// Criterion 1 — protocol conservation
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_protocol_conservation() {
    let _g = gate();
    let started = Instant::now();
    let gen = GenConfig {
        tasks: vec![suite_task("conserve", 12, 96, 2, 8, 14, 6, 0, 0)],
        seed: 4242,
        ..suite_gen_train()
    };
    let corpus = generate_corpus(&gen).expect("gen");
    let mut frames = 0usize;
    for sample in &corpus[0].samples {
        let oracle =
            OracleDenoiser::new(sample.activation_gt.as_bools().unwrap(), 0.25, 2).unwrap();
        let mut state = StreamState::new(suite_engine(), sample.spec.query_id).unwrap();
        for f in &sample.features {
            let (_, trace) = ingest_frame(&mut state, f.clone(), &oracle).unwrap();
            frames += 1;
            // disjoint union of per-step unmasked sets equals N_init
            let mut seen = std::collections::BTreeSet::new();
            let mut total = 0usize;
            for entry in &trace.steps {
                for &(pos, conf) in &entry.unmasked {
                    assert!(seen.insert(pos), "position {pos} unmasked twice");
                    total += 1;
                    for &(_, rem) in &entry.remaining {
                        assert!(
                            conf >= rem,
                            "confidence ordering violated: {conf} < {rem}"
                        );
                    }
                }
            }
            assert_eq!(total, trace.n_init, "unmask conservation violated");
            assert!(state.window().is_fully_resolved(), "masked tokens left over");
            if frames >= 1000 {
                break;
            }
        }
        if frames >= 1000 {
            break;
        }
    }
    assert!(frames >= 1000, "only {frames} frames ingested");
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "took {secs:.1} s, budget 30 s");
    println!("[PASS] criterion 1: {frames} frames, invariants hold, {secs:.2} s < 30 s");
}

// ---------------------------------------------------------------------------
// Criterion 2 — loss oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_loss_oracle() {
    let _g = gate();
    let mut rng = ChaCha20Rng::seed_from_u64(88);
    let mut max_diff = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=12);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let bits: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let t = rng.gen_range(0.01..1.0);
        let probs = ProbVector::new(p.clone()).unwrap();
        let target = ActivationSequence::from_bools(&bits);
        let loss = masked_ce_loss(&probs, &target, &mask, NoiseLevel::new(t).unwrap()).unwrap();
        // independent per-position summation
        let mut reference = 0.0;
        for j in 0..n {
            if mask[j] {
                let pj = if bits[j] { p[j] } else { 1.0 - p[j] };
                reference += -pj.ln() / t;
            }
        }
        max_diff = max_diff.max((loss - reference).abs());
    }
    assert!(max_diff <= 1e-9, "max deviation {max_diff}");

    let probs = ProbVector::new(vec![0.5]).unwrap();
    let target = ActivationSequence::parse("1").unwrap();
    let closed =
        masked_ce_loss(&probs, &target, &[true], NoiseLevel::new(0.5).unwrap()).unwrap();
    assert!((closed - 1.38629).abs() <= 1e-5, "closed form {closed}");
    println!(
        "[PASS] criterion 2: 10000 cases within {max_diff:.2e} of the summation oracle; closed form {closed:.5}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3 — gradient check
// ---------------------------------------------------------------------------

fn finite_difference_max_rel(seed: u64) -> f64 {
    let cfg = ModelConfig {
        feature_dim: 3,
        hidden_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        n_queries: 2,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let w_len = 6usize;
    let mut window = maskstream::activation::new_window(w_len).unwrap();
    for i in 0..w_len {
        window = window.shift_append_at(i as u64);
        match rng.gen_range(0..3) {
            0 => window.commit(i, false, 0.9),
            1 => window.commit(i, true, 0.9),
            _ => {}
        }
    }
    let feats: Vec<Vec<f64>> = (0..w_len)
        .map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    let target =
        ActivationSequence::from_bools(&(0..w_len).map(|_| rng.gen()).collect::<Vec<bool>>());
    let mut mask: Vec<bool> = (0..w_len).map(|_| rng.gen()).collect();
    mask[0] = true;
    let t = NoiseLevel::new(rng.gen_range(0.2..1.0)).unwrap();

    let model = NeuralDenoiser::new(cfg, seed.wrapping_add(100)).unwrap();
    let ctx = PredictorContext::new(1, &feats, &window).unwrap();
    let analytic = model.loss_gradient_flat(&ctx, &target, &mask, t).unwrap();
    let base = model.param_vector();
    assert_eq!(base.len(), analytic.len());

    let delta = 1e-5;
    let mut max_rel = 0.0f64;
    let mut probe = model.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let mut v = base.clone();
        v[i] += delta;
        probe.set_param_vector(&v);
        let lp = probe.loss(&ctx, &target, &mask, t).unwrap();
        v[i] = base[i] - delta;
        probe.set_param_vector(&v);
        let lm = probe.loss(&ctx, &target, &mask, t).unwrap();
        let numeric = (lp - lm) / (2.0 * delta);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[test]
fn criterion_03_gradient_check() {
    let _g = gate();
    let mut worst = 0.0f64;
    for seed in 1..=5u64 {
        let rel = finite_difference_max_rel(seed);
        assert!(rel < 1e-4, "seed {seed}: max relative error {rel}");
        worst = worst.max(rel);
    }
    println!("[PASS] criterion 3: 5 seeds, worst relative error {worst:.2e} < 1e-4");
}

// ---------------------------------------------------------------------------
// Criterion 4 — corruption statistics
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_corruption_statistics() {
    let _g = gate();
    let n = 10_000usize;
    let seq = ActivationSequence::from_bools(&vec![false; n]);
    for (i, &t) in [0.1, 0.3, 0.5, 0.9].iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(90 + i as u64);
        let rec = mask_independent(&seq, NoiseLevel::new(t).unwrap(), &mut rng).unwrap();
        let sigma = (n as f64 * t * (1.0 - t)).sqrt();
        let expected = n as f64 * t;
        let dev = (rec.masked_count as f64 - expected).abs();
        assert!(dev <= 3.0 * sigma, "t={t}: count {} off by {dev}", rec.masked_count);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let base = ActivationSequence::parse("0001111111000000111100000").unwrap();
    let draws = 30_000usize;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let rec = sample_training_corruption(&base, 2, &mut rng).unwrap();
        match rec.strategy {
            MaskingStrategy::BoundarySpan => counts[0] += 1,
            MaskingStrategy::SpanUnmask => counts[1] += 1,
            MaskingStrategy::Full => counts[2] += 1,
            MaskingStrategy::Independent => panic!("mixture drew independent"),
        }
    }
    let mut freqs = [0.0f64; 3];
    for (f, c) in freqs.iter_mut().zip(counts) {
        *f = c as f64 / draws as f64;
        assert!(
            (0.3133..=0.3533).contains(f),
            "strategy frequency {f} outside [0.3133, 0.3533]"
        );
    }
    println!(
        "[PASS] criterion 4: masking rates within 3 sigma; mixture frequencies {:.4}/{:.4}/{:.4}",
        freqs[0], freqs[1], freqs[2]
    );
}

// ---------------------------------------------------------------------------
// Criterion 5 — structured-mask structure
// ---------------------------------------------------------------------------

fn masked_runs(s: &ActivationSequence) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, t) in s.tokens().iter().enumerate() {
        match (t.is_masked(), start) {
            (true, None) => start = Some(i),
            (false, Some(a)) => {
                runs.push((a, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        runs.push((a, s.len() - 1));
    }
    runs
}

/// Test-side re-derivation of transition indices.
fn oracle_boundaries(bits: &[bool]) -> Vec<usize> {
    (0..bits.len().saturating_sub(1))
        .filter(|&i| bits[i] != bits[i + 1])
        .collect()
}

#[test]
fn criterion_05_structured_mask_structure() {
    let _g = gate();
    let mut rng = ChaCha20Rng::seed_from_u64(123);
    let samples = 10_000usize;

    for i in 0..samples {
        let len = rng.gen_range(4..40usize);
        // alternate span-structured and random sequences
        let bits: Vec<bool> = if i % 2 == 0 {
            let onset = rng.gen_range(0..len);
            let offset = rng.gen_range(onset..len);
            (0..len).map(|p| p >= onset && p <= offset).collect()
        } else {
            (0..len).map(|_| rng.gen()).collect()
        };
        let seq = ActivationSequence::from_bools(&bits);
        let t = NoiseLevel::new(rng.gen_range(0.0..=1.0)).unwrap();
        let rec = mask_boundary_span(&seq, t, &mut rng).unwrap();
        let runs = masked_runs(&rec.masked_seq);
        assert_eq!(runs.len(), 1, "expected exactly one masked run");
        let bounds = oracle_boundaries(&bits);
        if !bounds.is_empty() {
            let (a, b) = runs[0];
            let covers = bounds
                .iter()
                .any(|&i| (a <= i && i <= b) || (a <= i + 1 && i < b));
            assert!(covers, "masked run ({a},{b}) misses every transition {bounds:?}");
        }
    }

    let margin = 2usize;
    for i in 0..samples {
        let len = rng.gen_range(4..40usize);
        let bits: Vec<bool> = if i % 2 == 0 {
            let onset = rng.gen_range(0..len);
            let offset = rng.gen_range(onset..len);
            (0..len).map(|p| p >= onset && p <= offset).collect()
        } else {
            (0..len).map(|_| rng.gen()).collect()
        };
        let seq = ActivationSequence::from_bools(&bits);
        let t = NoiseLevel::new(rng.gen_range(0.0..=1.0)).unwrap();
        let target_reveal =
            (((1.0 - t.value()) * len as f64).round() as usize).min(len);
        let rec = mask_span_unmask(&seq, t, margin, &mut rng).unwrap();
        // exhaustive placement oracle: which positions may be revealed, and
        // the longest legal contiguous block at or below the target length
        let bounds = oracle_boundaries(&bits);
        let allowed: Vec<bool> = (0..len)
            .map(|x| {
                bounds
                    .iter()
                    .map(|&b| x.abs_diff(b).min(x.abs_diff(b + 1)))
                    .min()
                    .map(|d| d >= margin)
                    .unwrap_or(true)
            })
            .collect();
        let legal_at = |l: usize| -> Vec<usize> {
            if l == 0 || l > len {
                return Vec::new();
            }
            (0..=len - l)
                .filter(|&s| allowed[s..s + l].iter().all(|&a| a))
                .collect()
        };
        let mut expect_len = target_reveal;
        while expect_len > 0 && legal_at(expect_len).is_empty() {
            expect_len -= 1;
        }
        let revealed: Vec<usize> = rec
            .masked_seq
            .tokens()
            .iter()
            .enumerate()
            .filter_map(|(p, tok)| (!tok.is_masked()).then_some(p))
            .collect();
        assert_eq!(revealed.len(), expect_len, "revealed length mismatch");
        for &p in &revealed {
            assert!(allowed[p], "revealed {p} inside a margin-excluded zone");
        }
        if expect_len > 0 {
            assert!(legal_at(expect_len).contains(&revealed[0]));
        }
    }
    println!("[PASS] criterion 5: 10000 block masks cover a transition; 10000 reveals respect the margin oracle");
}

// ---------------------------------------------------------------------------
// Criterion 6 — masking-strategy ordering
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_masking_ablation_ordering() {
    let _g = gate();
    let fx = fixture();
    let started = Instant::now();
    let setup = AblationSetup {
        train_streams: fx.train_streams.clone(),
        eval: fx.eval.clone(),
        model_cfg: suite_model(),
        train_opts: suite_train_opts(),
        engine: suite_engine(),
        model_seed: MODEL_SEED,
        taus: vec![],
        ks: vec![],
    };
    let rows = run_ablation(AblationSuite::Masking, &setup).expect("masking suite");
    let secs = started.elapsed().as_secs_f64();
    let f1: std::collections::BTreeMap<&str, f64> =
        rows.iter().map(|r| (r.arm.as_str(), r.mean_f1)).collect();
    let indep = f1["independent_only"];
    let span = f1["span_only"];
    let span_full = f1["span_full"];
    let mixture = f1["span_full_span_unmask"];
    assert!(indep < span, "independent {indep:.3} !< span-only {span:.3}");
    assert!(span <= span_full, "span-only {span:.3} !<= span+full {span_full:.3}");
    assert!(
        span_full <= mixture,
        "span+full {span_full:.3} !<= mixture {mixture:.3}"
    );
    assert!(
        mixture - indep >= 0.10,
        "mixture {mixture:.3} does not exceed independent {indep:.3} by 10 points"
    );
    assert!(secs < 600.0, "masking suite took {secs:.0} s, budget 600 s");
    println!(
        "[PASS] criterion 6: F1 {indep:.3} < {span:.3} <= {span_full:.3} <= {mixture:.3}, gap {:.1} points, {secs:.0} s < 600 s",
        (mixture - indep) * 100.0
    );
}

// ---------------------------------------------------------------------------
// Criterion 7 — re-masking beats last-only; less flicker than the AR baseline
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_remasking_and_flicker() {
    let _g = gate();
    let fx = fixture();
    let opts = EvalOptions::default();
    let engine = suite_engine();

    let selective = eval_streams(&fx.eval, &engine, &EvalModelSpec::Denoiser(&fx.mixture), &opts)
        .expect("selective eval");
    let last_only_engine = EngineConfig { remask: RemaskMode::LastOnly, ..engine };
    let last_only = eval_streams(
        &fx.eval,
        &last_only_engine,
        &EvalModelSpec::Denoiser(&fx.mixture),
        &opts,
    )
    .expect("last-only eval");
    let ar = eval_streams(&fx.eval, &engine, &EvalModelSpec::Ar(&fx.ar), &opts).expect("ar eval");

    let sel_report = report_from_results(&selective, &engine, &opts, false);
    let last_report = report_from_results(&last_only, &last_only_engine, &opts, false);
    let ar_report = report_from_results(&ar, &engine, &opts, false);

    assert!(
        sel_report.mean_f1 > last_report.mean_f1,
        "selective {:.3} does not beat last-only {:.3}",
        sel_report.mean_f1,
        last_report.mean_f1
    );
    let s = sel_report.transitions_per_event;
    let a = ar_report.transitions_per_event;
    assert!(s.pre <= a.pre, "pre-event flicker {:.2} > ar {:.2}", s.pre, a.pre);
    assert!(s.during <= a.during, "during-event flicker {:.2} > ar {:.2}", s.during, a.during);
    assert!(s.post <= a.post, "post-event flicker {:.2} > ar {:.2}", s.post, a.post);
    println!(
        "[PASS] criterion 7: selective F1 {:.3} > last-only {:.3}; flicker/event {:.2}/{:.2}/{:.2} <= ar {:.2}/{:.2}/{:.2}",
        sel_report.mean_f1, last_report.mean_f1, s.pre, s.during, s.post, a.pre, a.during, a.post
    );
}

// ---------------------------------------------------------------------------
// Criterion 8 — retention-threshold sweep
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_tau_sweep() {
    let _g = gate();
    let fx = fixture();
    let taus = [0.0, 0.25, 0.5, 0.75, 0.85, 1.0];
    let mut f1s = Vec::new();
    for &tau in &taus {
        let engine = EngineConfig { tau, ..suite_engine() };
        f1s.push(mean_f1_of(&fx.eval, &engine, &EvalModelSpec::Denoiser(&fx.mixture), true));
    }
    let f1_zero = f1s[0];
    let f1_075 = f1s[3];
    let best = f1s.iter().cloned().fold(f64::MIN, f64::max);
    assert!(f1_zero < best, "tau=0 ({f1_zero:.3}) is the best arm");
    assert!(
        f1_075 > f1_zero,
        "tau=0.75 ({f1_075:.3}) does not beat tau=0 ({f1_zero:.3})"
    );
    let formatted: Vec<String> = taus
        .iter()
        .zip(&f1s)
        .map(|(t, f)| format!("{t}:{f:.3}"))
        .collect();
    println!("[PASS] criterion 8: {}", formatted.join(" "));
}

// ---------------------------------------------------------------------------
// Criterion 9 — K sweep: accuracy saturates, latency nondecreasing
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_k_sweep() {
    let _g = gate();
    let fx = fixture();
    let ks = [1usize, 2, 4, 8, 16];
    let opts = EvalOptions::default();
    let mut f1s = Vec::new();
    for &k in &ks {
        let engine = EngineConfig { denoise_steps: k, ..suite_engine() };
        f1s.push(mean_f1_of(&fx.eval, &engine, &EvalModelSpec::Denoiser(&fx.mixture), true));
    }

    // wall time measured serially on a fixed subset, best of two passes so a
    // scheduler hiccup cannot masquerade as a latency change
    let subset = [TaskCorpus {
        name: "latency".into(),
        samples: fx.eval[0].samples[..24.min(fx.eval[0].samples.len())].to_vec(),
    }];
    let serial = EvalOptions { parallel: false, ..EvalOptions::default() };
    let mut lat = Vec::new();
    for &k in &ks {
        let engine = EngineConfig { denoise_steps: k, ..suite_engine() };
        let mut best = f64::INFINITY;
        for _ in 0..2 {
            let results =
                eval_streams(&subset, &engine, &EvalModelSpec::Denoiser(&fx.mixture), &serial)
                    .expect("latency eval");
            let report = report_from_results(&results, &engine, &serial, true);
            let profile = report.latency.expect("latency profile");
            best = best.min(profile.retention_ms_per_frame + profile.denoise_ms_per_frame);
        }
        lat.push(best);
    }
    let f1_8 = f1s[3];
    let f1_16 = f1s[4];
    assert!(
        f1_8 >= 0.98 * f1_16,
        "F1 at K=8 ({f1_8:.3}) below 0.98 x F1 at K=16 ({f1_16:.3})"
    );
    for i in 1..ks.len() {
        assert!(
            lat[i] >= lat[i - 1] * 0.95,
            "per-frame wall time dropped beyond noise: K={} at {:.3} ms vs K={} at {:.3} ms",
            ks[i],
            lat[i],
            ks[i - 1],
            lat[i - 1]
        );
    }
    // growth stays at most linear in K
    let ratio = lat[ks.len() - 1] / lat[0];
    let k_ratio = (ks[ks.len() - 1] / ks[0]) as f64;
    assert!(
        ratio <= k_ratio * 1.5,
        "wall time grew superlinearly: x{ratio:.1} over a x{k_ratio:.0} step increase"
    );
    let fmt: Vec<String> = ks
        .iter()
        .zip(f1s.iter().zip(&lat))
        .map(|(k, (f, l))| format!("K={k}:{f:.3}@{l:.2}ms"))
        .collect();
    println!("[PASS] criterion 9: {}", fmt.join(" "));
}

// ---------------------------------------------------------------------------
// Criterion 10 — oracle ceiling and floor
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_oracle_ceiling_and_floor() {
    let _g = gate();
    let fx = fixture();
    // ceiling: noiseless oracle, benchmark gamma = 1
    let engine = EngineConfig { gamma: 1, ..suite_engine() };
    let opts = EvalOptions::default();
    let ceiling = eval_streams(
        &fx.eval,
        &engine,
        &EvalModelSpec::Oracle { epsilon: 0.0, boundary_blur: 0 },
        &opts,
    )
    .expect("ceiling eval");
    let report = report_from_results(&ceiling, &engine, &opts, false);
    assert_eq!(report.mean_f1, 1.0, "oracle ceiling F1 {}", report.mean_f1);
    for r in &ceiling {
        let onsets: Vec<u64> = r.events.iter().map(|e| e.start_s).collect();
        let triggers: Vec<u64> = r.triggers.iter().map(|t| t.time_s).collect();
        assert_eq!(triggers, onsets, "stream {}: triggers off the onsets", r.id);
    }

    // floor: fully uninformative oracle vs the shuffled-prediction band
    let floor = eval_streams(
        &fx.eval,
        &engine,
        &EvalModelSpec::Oracle { epsilon: 0.5, boundary_blur: 0 },
        &opts,
    )
    .expect("floor eval");
    let floor_report = report_from_results(&floor, &engine, &opts, false);
    let (lo, hi) = permutation_mean_f1_band(&floor, &SegmentMatchConfig::default(), 200, 777);
    assert!(
        floor_report.mean_f1 >= lo && floor_report.mean_f1 <= hi,
        "floor F1 {:.4} outside the 95% permutation band [{lo:.4}, {hi:.4}]",
        floor_report.mean_f1
    );
    println!(
        "[PASS] criterion 10: ceiling F1 1.000 with triggers at onsets; floor F1 {:.4} in band [{lo:.4}, {hi:.4}]",
        floor_report.mean_f1
    );
}

// ---------------------------------------------------------------------------
// Criterion 11 — CLI determinism
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_maskstream"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("spawn cli");
    assert!(status.success(), "cli {:?} failed with {status}", args);
}

fn read_bytes(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn criterion_11_cli_determinism() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let gen_cfg = base.join("gen.json");
    std::fs::write(
        &gen_cfg,
        serde_json::to_string(&GenConfig {
            tasks: vec![
                suite_task("single", 6, 48, 1, 6, 10, 4, 0, 0),
                suite_task("multi", 6, 48, 2, 5, 8, 5, 0, 1),
            ],
            seed: 31,
            ..suite_gen_train()
        })
        .unwrap(),
    )
    .unwrap();

    let train_cfg = base.join("train.json");
    let eval_cfg = base.join("eval.json");
    for run in ["a", "b"] {
        let out = base.join(run);
        std::fs::create_dir_all(&out).unwrap();
        run_cli(&["gen", "--config", gen_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        std::fs::write(
            &train_cfg,
            serde_json::json!({
                "corpus": [out.join("single.jsonl"), out.join("multi.jsonl")],
                "kind": "diffusion",
                "model": {"feature_dim": 8, "hidden_dim": 16, "n_blocks": 1, "n_heads": 2, "n_queries": 4},
                "masking": "mixture",
                "steps": 400, "lr": 0.1, "window_max": 16, "seed": 5, "model_seed": 2
            })
            .to_string(),
        )
        .unwrap();
        run_cli(&["train", "--config", train_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        std::fs::write(
            &eval_cfg,
            serde_json::json!({
                "corpus": [out.join("single.jsonl"), out.join("multi.jsonl")],
                "model": {"checkpoint": {"path": out.join("checkpoint.json")}},
                "engine": {"window_capacity": 16, "max_context": 24, "retain_on_cap": 12, "feature_dim": 8, "gamma": 2}
            })
            .to_string(),
        )
        .unwrap();
        run_cli(&["stream-eval", "--config", eval_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }

    for file in [
        "single.jsonl",
        "multi.jsonl",
        "checkpoint.json",
        "loss.csv",
        "report.json",
        "triggers.jsonl",
    ] {
        let a = read_bytes(&base.join("a").join(file));
        let b = read_bytes(&base.join("b").join(file));
        assert_eq!(a, b, "{file} differs between identically seeded runs");
    }
    println!("[PASS] criterion 11: gen/train/stream-eval outputs byte-identical across reruns");
}

// ---------------------------------------------------------------------------
// Criterion 12 — context cap behavior
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_context_cap() {
    let _g = gate();
    // default engine configuration: cap 256, retain 128
    let config = EngineConfig { gamma: 1, ..EngineConfig::default() };
    let oracle = OracleDenoiser::new(vec![false; 600], 0.0, 0).unwrap();
    let mut state = StreamState::new(config, 0).unwrap();
    let mut caps = 0usize;
    for _ in 0..600u64 {
        let (decision, trace) = ingest_frame(&mut state, vec![0.0; 8], &oracle).unwrap();
        assert!(!decision.fired, "quiet stream must never trigger");
        assert!(state.cache_len() <= 256, "cache grew to {}", state.cache_len());
        if trace.capped {
            caps += 1;
            assert_eq!(state.cache_len(), 128, "cap retained {}", state.cache_len());
        }
    }
    assert!(caps >= 2, "600 s stream should cap more than once, saw {caps}");
    println!("[PASS] criterion 12: cache never exceeded 256; {caps} cap events each retained exactly 128");
}
