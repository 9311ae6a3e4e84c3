//! End-to-end evaluation and ablation drivers: stream a corpus through the
//! denoising engine (or the AR baseline), turn committed per-second
//! decisions into predicted spans, and aggregate F1, flicker and latency
//! into a schema-stable report.
//!
//! Evaluation shards across streams in parallel; results are re-sorted by
//! stream id before aggregation so reports are order-deterministic.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{active_spans, ActivationSequence, EventSpan};
use crate::baseline::{ar_step, ArStreamState, FrameScorer};
use crate::denoiser::{
    train, Denoiser, DuplicationMode, MaskingMixture, ModelConfig, NeuralDenoiser,
    OracleDenoiser, TrainOptions,
};
use crate::engine::{ingest_frame, EngineConfig, RemaskMode, StreamState, TriggerRecord};
use crate::metrics::{segment_f1, transition_histogram, SegmentMatchConfig, TransitionHistogram};
use crate::streamgen::{StreamSample, TaskCorpus};
use crate::{Error, Result};

/// Which model drives the engine during evaluation.
pub enum EvalModelSpec<'a> {
    /// Per-stream oracle built from each stream's ground truth.
    Oracle { epsilon: f64, boundary_blur: usize },
    Denoiser(&'a dyn Denoiser),
    Ar(&'a dyn FrameScorer),
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub match_cfg: SegmentMatchConfig,
    pub parallel: bool,
    /// Keep lightweight per-frame trace summaries for debugging dumps.
    pub collect_traces: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            match_cfg: SegmentMatchConfig::default(),
            parallel: true,
            collect_traces: false,
        }
    }
}

/// Per-frame summary of one engine step, for `--trace` dumps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame: u64,
    pub n_init: usize,
    pub remasked: usize,
    pub steps: usize,
    pub capped: bool,
    pub fired: bool,
}

/// Raw per-stream outcome, before aggregation.
#[derive(Clone, Debug)]
pub struct StreamEvalResult {
    pub task: String,
    pub id: u32,
    pub f1: f64,
    pub decisions: Vec<bool>,
    pub triggers: Vec<TriggerRecord>,
    pub events: Vec<EventSpan>,
    pub hist: TransitionHistogram,
    /// Summed wall time of retention predictor passes.
    pub retention_secs: f64,
    /// Summed wall time of denoising predictor passes.
    pub denoise_secs: f64,
    pub denoise_calls: usize,
    pub frames: usize,
    /// Populated only when trace collection is requested.
    pub frame_traces: Vec<FrameTrace>,
}

/// Predicted spans are read off the committed per-second decision history:
/// the value each position held when it was evicted from the window or when
/// the stream ended.
pub fn spans_from_decisions(decisions: &[bool]) -> Vec<(u64, u64)> {
    let seq = ActivationSequence::from_bools(decisions);
    active_spans(&seq)
        .expect("bool decisions are always resolved")
        .into_iter()
        .map(|(a, b)| (a as u64, b as u64))
        .collect()
}

pub fn gt_spans(events: &[EventSpan]) -> Vec<(u64, u64)> {
    events.iter().map(|e| (e.start_s, e.end_s)).collect()
}

fn eval_one(
    sample: &StreamSample,
    task: &str,
    engine_cfg: &EngineConfig,
    model: &EvalModelSpec,
    opts: &EvalOptions,
) -> Result<StreamEvalResult> {
    let mut cfg = *engine_cfg;
    cfg.feature_dim = sample.spec.feature_dim;
    let mut retention_secs = 0.0;
    let mut denoise_secs = 0.0;
    let mut denoise_calls = 0usize;
    let mut frame_traces = Vec::new();

    let (decisions, triggers) = match model {
        EvalModelSpec::Ar(scorer) => {
            let mut state = ArStreamState::new(
                cfg.max_context,
                cfg.retain_on_cap,
                cfg.feature_dim,
                sample.spec.query_id,
            )?;
            for f in &sample.features {
                ar_step(&mut state, f.clone(), *scorer)?;
            }
            (state.decisions().to_vec(), state.context_log().to_vec())
        }
        _ => {
            let oracle;
            let denoiser: &dyn Denoiser = match model {
                EvalModelSpec::Oracle { epsilon, boundary_blur } => {
                    oracle = OracleDenoiser::new(
                        sample.activation_gt.as_bools()?,
                        *epsilon,
                        *boundary_blur,
                    )?;
                    &oracle
                }
                EvalModelSpec::Denoiser(d) => *d,
                EvalModelSpec::Ar(_) => unreachable!(),
            };
            let mut state = StreamState::new(cfg, sample.spec.query_id)?;
            for (frame, f) in sample.features.iter().enumerate() {
                let (decision, trace) = ingest_frame(&mut state, f.clone(), denoiser)?;
                retention_secs += trace.retention_secs.unwrap_or(0.0);
                denoise_secs += trace.step_secs.iter().sum::<f64>();
                denoise_calls += trace.step_secs.len();
                if opts.collect_traces {
                    frame_traces.push(FrameTrace {
                        frame: frame as u64,
                        n_init: trace.n_init,
                        remasked: trace.remask_set.len(),
                        steps: trace.steps.len(),
                        capped: trace.capped,
                        fired: decision.fired,
                    });
                }
            }
            (state.decisions().to_vec(), state.context_log().to_vec())
        }
    };

    let pred = spans_from_decisions(&decisions);
    let f1 = segment_f1(&pred, &gt_spans(&sample.spec.events), &opts.match_cfg);
    let hist = transition_histogram(&decisions, &sample.spec.events);
    Ok(StreamEvalResult {
        task: task.to_string(),
        id: sample.spec.id,
        f1,
        decisions,
        triggers,
        events: sample.spec.events.clone(),
        hist,
        retention_secs,
        denoise_secs,
        denoise_calls,
        frames: sample.features.len(),
        frame_traces,
    })
}

/// Evaluate every stream of every task; results come back sorted by
/// `(task, id)` regardless of scheduling.
pub fn eval_streams(
    corpus: &[TaskCorpus],
    engine_cfg: &EngineConfig,
    model: &EvalModelSpec,
    opts: &EvalOptions,
) -> Result<Vec<StreamEvalResult>> {
    let jobs: Vec<(&str, &StreamSample)> = corpus
        .iter()
        .flat_map(|t| t.samples.iter().map(move |s| (t.name.as_str(), s)))
        .collect();
    let mut results = if opts.parallel {
        jobs.par_iter()
            .map(|(task, s)| eval_one(s, task, engine_cfg, model, opts))
            .collect::<Result<Vec<_>>>()?
    } else {
        jobs.iter()
            .map(|(task, s)| eval_one(s, task, engine_cfg, model, opts))
            .collect::<Result<Vec<_>>>()?
    };
    results.sort_by(|a, b| a.task.cmp(&b.task).then(a.id.cmp(&b.id)));
    Ok(results)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub pre: u64,
    pub during: u64,
    pub post: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionRates {
    pub pre: f64,
    pub during: f64,
    pub post: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerStats {
    pub count: usize,
    /// Triggers that fired inside some ground-truth event.
    pub matched: usize,
    pub false_triggers: usize,
    /// Mean of (trigger second - event onset) over matched triggers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_latency_s: Option<f64>,
}

/// Wall-time profile of predictor calls. Non-deterministic across runs, so
/// it is kept out of the canonical report JSON and written separately when
/// profiling is requested.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub retention_ms_per_frame: f64,
    pub denoise_ms_per_frame: f64,
    pub predictor_calls: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub engine: EngineConfig,
    pub iou_threshold: f64,
    pub n_streams: usize,
    pub n_events: usize,
    pub per_task_f1: BTreeMap<String, f64>,
    /// Arithmetic mean of the per-task F1s.
    pub mean_f1: f64,
    pub transitions: RegionCounts,
    pub transitions_per_event: RegionRates,
    pub transition_histogram: TransitionHistogram,
    pub trigger_stats: TriggerStats,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencyProfile>,
}

pub const REPORT_VERSION: u32 = 1;

fn trigger_stats(results: &[StreamEvalResult]) -> TriggerStats {
    let mut stats = TriggerStats::default();
    let mut latency_sum = 0u64;
    for r in results {
        for t in &r.triggers {
            stats.count += 1;
            match r.events.iter().find(|e| e.contains(t.time_s)) {
                Some(e) => {
                    stats.matched += 1;
                    latency_sum += t.time_s - e.start_s;
                }
                None => stats.false_triggers += 1,
            }
        }
    }
    if stats.matched > 0 {
        stats.mean_latency_s = Some(latency_sum as f64 / stats.matched as f64);
    }
    stats
}

/// Aggregate per-stream outcomes into a report. Latency is attached only
/// when `with_latency` is set (it is wall-clock and not reproducible).
pub fn report_from_results(
    results: &[StreamEvalResult],
    engine_cfg: &EngineConfig,
    opts: &EvalOptions,
    with_latency: bool,
) -> MetricReport {
    let mut by_task: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut transitions = RegionCounts::default();
    let mut merged_hist = TransitionHistogram::default();
    let mut n_events = 0usize;
    let mut retention = 0.0;
    let mut denoise = 0.0;
    let mut calls = 0usize;
    let mut frames = 0usize;
    for r in results {
        by_task.entry(r.task.clone()).or_default().push(r.f1);
        transitions.pre += r.hist.pre_total();
        transitions.during += r.hist.during_total();
        transitions.post += r.hist.post_total();
        merged_hist.merge(&r.hist);
        n_events += r.events.len();
        retention += r.retention_secs;
        denoise += r.denoise_secs;
        calls += r.denoise_calls;
        frames += r.frames;
    }
    let per_task_f1: BTreeMap<String, f64> = by_task
        .into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (k, mean)
        })
        .collect();
    let mean_f1 = if per_task_f1.is_empty() {
        0.0
    } else {
        per_task_f1.values().sum::<f64>() / per_task_f1.len() as f64
    };
    let per_event = |c: u64| {
        if n_events == 0 {
            0.0
        } else {
            c as f64 / n_events as f64
        }
    };
    let latency = with_latency.then(|| LatencyProfile {
        retention_ms_per_frame: if frames > 0 { 1000.0 * retention / frames as f64 } else { 0.0 },
        denoise_ms_per_frame: if frames > 0 { 1000.0 * denoise / frames as f64 } else { 0.0 },
        predictor_calls: calls,
        frames,
    });
    MetricReport {
        version: REPORT_VERSION,
        engine: *engine_cfg,
        iou_threshold: opts.match_cfg.iou_threshold,
        n_streams: results.len(),
        n_events,
        per_task_f1,
        mean_f1,
        transitions,
        transitions_per_event: RegionRates {
            pre: per_event(transitions.pre),
            during: per_event(transitions.during),
            post: per_event(transitions.post),
        },
        transition_histogram: merged_hist,
        trigger_stats: trigger_stats(results),
        latency,
    }
}

/// Stream the corpus through the configured model and aggregate.
pub fn run_eval(
    corpus: &[TaskCorpus],
    engine_cfg: &EngineConfig,
    model: &EvalModelSpec,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let results = eval_streams(corpus, engine_cfg, model, opts)?;
    Ok(report_from_results(&results, engine_cfg, opts, false))
}

/// Chance band for a set of outcomes: shuffle each stream's decision series,
/// recompute the mean F1, repeat, and return the 2.5/97.5 percentile band.
pub fn permutation_mean_f1_band(
    results: &[StreamEvalResult],
    match_cfg: &SegmentMatchConfig,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut by_task: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in results {
            let mut shuffled = r.decisions.clone();
            shuffled.shuffle(&mut rng);
            let pred = spans_from_decisions(&shuffled);
            let f1 = segment_f1(&pred, &gt_spans(&r.events), match_cfg);
            by_task.entry(r.task.as_str()).or_default().push(f1);
        }
        let task_means: Vec<f64> = by_task
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        means.push(task_means.iter().sum::<f64>() / task_means.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo_idx = ((draws as f64 - 1.0) * 0.025).floor() as usize;
    let hi_idx = ((draws as f64 - 1.0) * 0.975).ceil() as usize;
    (means[lo_idx], means[hi_idx.min(draws - 1)])
}

/// Write the trigger log as JSONL, one record per fired trigger, ordered by
/// `(stream, t)`.
pub fn write_trigger_log(path: &Path, results: &[StreamEvalResult], model_tag: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        t: u64,
        window: &'a str,
        span_len: usize,
        stream: u32,
        model: &'a str,
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in results {
        for trig in &r.triggers {
            serde_json::to_writer(
                &mut w,
                &Line {
                    t: trig.time_s,
                    window: &trig.window,
                    span_len: trig.span_len,
                    stream: r.id,
                    model: model_tag,
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Dump collected per-frame trace summaries as JSONL.
pub fn write_trace_dump(path: &Path, results: &[StreamEvalResult]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        stream: u32,
        #[serde(flatten)]
        trace: &'a FrameTrace,
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in results {
        for t in &r.frame_traces {
            serde_json::to_writer(&mut w, &Line { stream: r.id, trace: t })?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Named ablation suites mirroring the masking / duplication / re-masking /
/// tau / K comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationSuite {
    Masking,
    Duplication,
    Remasking,
    TauSweep,
    KSweep,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masking" => Ok(AblationSuite::Masking),
            "duplication" => Ok(AblationSuite::Duplication),
            "remasking" => Ok(AblationSuite::Remasking),
            "tau_sweep" | "tau" => Ok(AblationSuite::TauSweep),
            "k_sweep" | "k" => Ok(AblationSuite::KSweep),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation suite {other:?} (expected masking, duplication, remasking, tau_sweep or k_sweep)"
            ))),
        }
    }
}

/// Everything an ablation run needs: training streams, an eval corpus, and
/// the matched base configuration shared by every arm.
pub struct AblationSetup {
    pub train_streams: Vec<StreamSample>,
    pub eval: Vec<TaskCorpus>,
    pub model_cfg: ModelConfig,
    pub train_opts: TrainOptions,
    pub engine: EngineConfig,
    pub model_seed: u64,
    pub taus: Vec<f64>,
    pub ks: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub mean_f1: f64,
    pub transitions_per_event: f64,
    pub denoise_ms_per_frame: f64,
}

fn row_from_results(
    arm: &str,
    results: &[StreamEvalResult],
    engine: &EngineConfig,
    opts: &EvalOptions,
) -> AblationRow {
    let report = report_from_results(results, engine, opts, true);
    let per_event = report.transitions_per_event;
    AblationRow {
        arm: arm.to_string(),
        mean_f1: report.mean_f1,
        transitions_per_event: per_event.pre + per_event.during + per_event.post,
        denoise_ms_per_frame: report
            .latency
            .map(|l| l.retention_ms_per_frame + l.denoise_ms_per_frame)
            .unwrap_or(0.0),
    }
}

/// Train one arm's model with the shared budget.
pub fn train_arm(
    setup: &AblationSetup,
    mixture: MaskingMixture,
    duplication: DuplicationMode,
) -> Result<NeuralDenoiser> {
    let mut model = NeuralDenoiser::new(setup.model_cfg, setup.model_seed)?;
    model.duplication = duplication;
    let opts = TrainOptions { mixture, ..setup.train_opts };
    train(&mut model, &setup.train_streams, &opts)?;
    Ok(model)
}

/// Run a named suite; every arm shares the training corpus, budget and
/// evaluation streams.
pub fn run_ablation(suite: AblationSuite, setup: &AblationSetup) -> Result<Vec<AblationRow>> {
    let opts = EvalOptions::default();
    let mut rows = Vec::new();
    match suite {
        AblationSuite::Masking => {
            let arms = [
                ("independent_only", MaskingMixture::IndependentOnly),
                ("span_only", MaskingMixture::SpanOnly),
                ("span_full", MaskingMixture::SpanFull),
                ("span_full_span_unmask", MaskingMixture::Mixture),
            ];
            // arms are independent given their seeds: train in parallel
            let models: Vec<(usize, NeuralDenoiser)> = arms
                .par_iter()
                .enumerate()
                .map(|(i, (_, mixture))| {
                    train_arm(setup, *mixture, DuplicationMode::Enabled).map(|m| (i, m))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut models = models;
            models.sort_by_key(|(i, _)| *i);
            for ((name, _), (_, model)) in arms.iter().zip(&models) {
                let results = eval_streams(
                    &setup.eval,
                    &setup.engine,
                    &EvalModelSpec::Denoiser(model),
                    &opts,
                )?;
                rows.push(row_from_results(name, &results, &setup.engine, &opts));
            }
        }
        AblationSuite::Duplication => {
            let arms = [
                ("duplication_on", DuplicationMode::Enabled),
                ("duplication_off", DuplicationMode::Disabled),
            ];
            let models: Vec<(usize, NeuralDenoiser)> = arms
                .par_iter()
                .enumerate()
                .map(|(i, (_, mode))| {
                    train_arm(setup, setup.train_opts.mixture, *mode).map(|m| (i, m))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut models = models;
            models.sort_by_key(|(i, _)| *i);
            for ((name, _), (_, model)) in arms.iter().zip(&models) {
                let results = eval_streams(
                    &setup.eval,
                    &setup.engine,
                    &EvalModelSpec::Denoiser(model),
                    &opts,
                )?;
                rows.push(row_from_results(name, &results, &setup.engine, &opts));
            }
        }
        AblationSuite::Remasking => {
            let model = train_arm(setup, setup.train_opts.mixture, DuplicationMode::Enabled)?;
            for (name, remask) in [
                ("selective", RemaskMode::Selective),
                ("last_only", RemaskMode::LastOnly),
            ] {
                let engine = EngineConfig { remask, ..setup.engine };
                let results =
                    eval_streams(&setup.eval, &engine, &EvalModelSpec::Denoiser(&model), &opts)?;
                rows.push(row_from_results(name, &results, &engine, &opts));
            }
        }
        AblationSuite::TauSweep => {
            let model = train_arm(setup, setup.train_opts.mixture, DuplicationMode::Enabled)?;
            for &tau in &setup.taus {
                let engine = EngineConfig { tau, ..setup.engine };
                let results =
                    eval_streams(&setup.eval, &engine, &EvalModelSpec::Denoiser(&model), &opts)?;
                rows.push(row_from_results(
                    &format!("tau_{tau:.2}"),
                    &results,
                    &engine,
                    &opts,
                ));
            }
        }
        AblationSuite::KSweep => {
            let model = train_arm(setup, setup.train_opts.mixture, DuplicationMode::Enabled)?;
            for &k in &setup.ks {
                let engine = EngineConfig { denoise_steps: k, ..setup.engine };
                // serial evaluation so wall times are comparable across arms
                let serial = EvalOptions { parallel: false, ..opts };
                let results =
                    eval_streams(&setup.eval, &engine, &EvalModelSpec::Denoiser(&model), &serial)?;
                rows.push(row_from_results(&format!("k_{k}"), &results, &engine, &serial));
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "arm,mean_f1,transitions_per_event,denoise_ms_per_frame")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6}",
            r.arm, r.mean_f1, r.transitions_per_event, r.denoise_ms_per_frame
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready TSV of a transition histogram: x (offset or percent) and
/// count, one region per block separated by the region column.
pub fn write_transition_tsv(path: &Path, hist: &TransitionHistogram) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "region\tx\tcount")?;
    for (i, c) in hist.pre.iter().enumerate() {
        writeln!(w, "pre\t{}\t{}", i as i64 - 60, c)?;
    }
    for (i, c) in hist.during.iter().enumerate() {
        writeln!(w, "during\t{i}\t{c}")?;
    }
    for (i, c) in hist.post.iter().enumerate() {
        writeln!(w, "post\t{}\t{}", i + 1, c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_report(path: &Path, report: &MetricReport) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
