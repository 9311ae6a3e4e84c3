//! Synthetic stream and training-corpus construction.
//!
//! A stream is a surrogate for an encoded video: one `d`-dimensional feature
//! vector per second, plus ground-truth event spans for one query. Features
//! are Gaussian noise with a query-specific signal pattern added during that
//! query's events; the signal ramps in and out over `ramp_s` seconds so the
//! exact boundary is ambiguous from any single frame. Distractor events from
//! other query ids can be injected so that triggering requires query
//! conditioning rather than mere change detection.
//!
//! Corpora serialize as JSONL, one stream per line:
//! `{"id", "length_s", "query_id", "events":[[s,e],...], "features":[[...],...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationSequence, EventSpan};
use crate::{Error, Result};

/// Generation parameters for a single stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamSpec {
    pub id: u32,
    pub length_s: u64,
    /// Target-query events, sorted and non-overlapping.
    pub events: Vec<EventSpan>,
    pub query_id: u32,
    pub feature_dim: usize,
    /// Signal amplitude over unit noise; `inf` means noiseless, 0 means no
    /// signal at all.
    pub snr: f64,
    /// Seconds over which the event signal fades in and out.
    pub ramp_s: u64,
    /// Feature bumps tied to other query ids; may overlap anything.
    pub distractors: Vec<EventSpan>,
    pub seed: u64,
}

impl StreamSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        length_s: u64,
        events: Vec<EventSpan>,
        query_id: u32,
        feature_dim: usize,
        snr: f64,
        ramp_s: u64,
        distractors: Vec<EventSpan>,
        seed: u64,
    ) -> Result<Self> {
        validate_events(&events, length_s)?;
        for d in &distractors {
            if d.end_s >= length_s {
                return Err(Error::InvalidArgument(format!(
                    "distractor span ({}, {}) outside [0, {length_s})",
                    d.start_s, d.end_s
                )));
            }
        }
        Ok(StreamSpec {
            id,
            length_s,
            events,
            query_id,
            feature_dim,
            snr,
            ramp_s,
            distractors,
            seed,
        })
    }
}

fn validate_events(events: &[EventSpan], length_s: u64) -> Result<()> {
    for e in events {
        if e.end_s >= length_s {
            return Err(Error::InvalidArgument(format!(
                "span ({}, {}) outside [0, {length_s})",
                e.start_s, e.end_s
            )));
        }
    }
    for pair in events.windows(2) {
        if pair[1].start_s <= pair[0].end_s {
            return Err(Error::InvalidArgument(format!(
                "events overlap or are unsorted: ({}, {}) then ({}, {})",
                pair[0].start_s, pair[0].end_s, pair[1].start_s, pair[1].end_s
            )));
        }
    }
    Ok(())
}

/// A realized stream: per-second features plus the rasterized ground truth.
#[derive(Clone, Debug)]
pub struct StreamSample {
    pub spec: StreamSpec,
    pub features: Vec<Vec<f64>>,
    pub activation_gt: ActivationSequence,
}

/// Rasterize event spans over `[0, length)`: position `i` is Active iff it
/// falls inside some span (inclusive ends).
pub fn rasterize(events: &[EventSpan], length: u64) -> Result<ActivationSequence> {
    validate_events(events, length)?;
    let mut bits = vec![false; length as usize];
    for e in events {
        for s in e.start_s..=e.end_s {
            bits[s as usize] = true;
        }
    }
    Ok(ActivationSequence::from_bools(&bits))
}

/// Unit signal pattern for a query id: a one-hot feature channel.
pub fn query_template(query_id: u32, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[query_id as usize % dim] = 1.0;
    v
}

/// Signal amplitude multiplier at `second` within `span`, ramping linearly
/// over `ramp_s` seconds at each end.
pub fn ramp_amplitude(second: u64, span: &EventSpan, ramp_s: u64) -> f64 {
    if ramp_s == 0 {
        return 1.0;
    }
    let up = (second - span.start_s + 1) as f64 / ramp_s as f64;
    let down = (span.end_s - second + 1) as f64 / ramp_s as f64;
    up.min(down).min(1.0)
}

/// Per-second feature vectors for a stream. Deterministic given the RNG
/// state; the signal pattern of `spec.query_id` is added during its events
/// and distractor patterns during theirs.
pub fn emit_features<R: Rng>(spec: &StreamSpec, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if spec.feature_dim < 2 {
        return Err(Error::InvalidArgument("feature_dim must be >= 2".into()));
    }
    let (noise_std, amp) = if spec.snr.is_infinite() {
        (0.0, 1.0)
    } else {
        (1.0, spec.snr)
    };
    let template = query_template(spec.query_id, spec.feature_dim);
    let mut out = Vec::with_capacity(spec.length_s as usize);
    for s in 0..spec.length_s {
        let mut v: Vec<f64> = (0..spec.feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                noise_std * z
            })
            .collect();
        for e in &spec.events {
            if e.contains(s) {
                let a = amp * ramp_amplitude(s, e, spec.ramp_s);
                for (vi, ti) in v.iter_mut().zip(&template) {
                    *vi += a * ti;
                }
            }
        }
        for d in &spec.distractors {
            if d.contains(s) {
                let a = amp * ramp_amplitude(s, d, spec.ramp_s);
                let dt = query_template(d.label, spec.feature_dim);
                for (vi, ti) in v.iter_mut().zip(&dt) {
                    *vi += a * ti;
                }
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// Draw a training window over a stream of `length` seconds: the window
/// length is uniform in `[min(length, 8), min(length, max_len)]` and the
/// start uniform among positions that keep the window inside the stream.
pub fn sample_training_window<R: Rng>(length: u64, max_len: u64, rng: &mut R) -> (u64, u64) {
    assert!(length >= 1, "stream length must be >= 1");
    let lower = length.min(8);
    let upper = length.min(max_len).max(lower);
    let win_len = rng.gen_range(lower..=upper);
    let win_start = rng.gen_range(0..=length - win_len);
    (win_start, win_len)
}

/// Uniform cutoff in `(prev_end, cur_start]`; training forces every position
/// before the cutoff to Inactive so completed events stop re-triggering.
pub fn multi_event_cutoff<R: Rng>(prev_end: u64, cur_start: u64, rng: &mut R) -> Result<u64> {
    if prev_end >= cur_start {
        return Err(Error::InvalidArgument(format!(
            "previous event end {prev_end} must precede current start {cur_start}"
        )));
    }
    Ok(rng.gen_range(prev_end + 1..=cur_start))
}

/// Ground-truth activation for a training window `[win_start, win_start+win_len)`,
/// clipped from the stream's event spans. All-zero when the events lie
/// entirely outside the window.
pub fn build_target(win_start: u64, win_len: u64, events: &[EventSpan]) -> ActivationSequence {
    let bits: Vec<bool> = (0..win_len)
        .map(|i| {
            let s = win_start + i;
            events.iter().any(|e| e.contains(s))
        })
        .collect();
    ActivationSequence::from_bools(&bits)
}

/// Materialize a sample from its spec. Feature noise derives from
/// `spec.seed`, so regeneration is bit-for-bit reproducible.
pub fn generate_sample(spec: &StreamSpec) -> Result<StreamSample> {
    let mut rng = ChaCha20Rng::seed_from_u64(splitmix64(spec.seed ^ 0xfeed_f00d));
    let features = emit_features(spec, &mut rng)?;
    let activation_gt = rasterize(&spec.events, spec.length_s)?;
    Ok(StreamSample {
        spec: spec.clone(),
        features,
        activation_gt,
    })
}

/// Generation recipe for one named task group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub name: String,
    pub count: u32,
    pub length_s: u64,
    pub n_events: u32,
    pub event_len_min: u64,
    pub event_len_max: u64,
    /// Minimum inactive gap between consecutive events (>= 1 keeps adjacent
    /// events distinguishable at the trigger level).
    pub min_gap: u64,
    pub queries: Vec<u32>,
    pub distractors_min: u32,
    pub distractors_max: u32,
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config(format!("task {}: count must be > 0", self.name)));
        }
        if self.event_len_min == 0 || self.event_len_min > self.event_len_max {
            return Err(Error::Config(format!(
                "task {}: bad event length range [{}, {}]",
                self.name, self.event_len_min, self.event_len_max
            )));
        }
        if self.queries.is_empty() {
            return Err(Error::Config(format!("task {}: empty query pool", self.name)));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::Config(format!(
                "task {}: distractors_min > distractors_max",
                self.name
            )));
        }
        let n = self.n_events as u64;
        if n > 0 {
            let need = n * self.event_len_max + self.min_gap * (n - 1);
            if need > self.length_s {
                return Err(Error::Config(format!(
                    "task {}: {} events of up to {} s with gap {} cannot fit in {} s",
                    self.name, n, self.event_len_max, self.min_gap, self.length_s
                )));
            }
        }
        Ok(())
    }

    /// Expected fraction of active seconds per stream, exact for the
    /// rejection-free placement scheme used below.
    pub fn expected_active_fraction(&self) -> f64 {
        let mean_len = (self.event_len_min + self.event_len_max) as f64 / 2.0;
        self.n_events as f64 * mean_len / self.length_s as f64
    }
}

/// Whole-corpus generation recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub feature_dim: usize,
    pub snr: f64,
    pub ramp_s: u64,
    pub seed: u64,
    pub tasks: Vec<TaskGenConfig>,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be >= 2".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        Ok(())
    }
}

/// A named group of streams evaluated together.
#[derive(Clone, Debug)]
pub struct TaskCorpus {
    pub name: String,
    pub samples: Vec<StreamSample>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derived per-stream seed, stable under sharding.
pub fn stream_seed(base: u64, task_idx: usize, stream_idx: usize) -> u64 {
    splitmix64(base ^ ((task_idx as u64) << 40) ^ (stream_idx as u64))
}

/// Sample non-overlapping event spans: lengths uniform in the configured
/// range, slack distributed over the gaps by a sorted-cuts composition, so no
/// rejection is ever needed and the expected active fraction is exact.
fn place_events<R: Rng>(cfg: &TaskGenConfig, label: u32, rng: &mut R) -> Vec<EventSpan> {
    let n = cfg.n_events as usize;
    if n == 0 {
        return Vec::new();
    }
    let lengths: Vec<u64> = (0..n)
        .map(|_| rng.gen_range(cfg.event_len_min..=cfg.event_len_max))
        .collect();
    let used: u64 = lengths.iter().sum::<u64>() + cfg.min_gap * (n as u64 - 1);
    let slack = cfg.length_s - used;
    let mut cuts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(n);
    let mut cursor = 0u64;
    let mut prev_cut = 0u64;
    for (i, len) in lengths.iter().enumerate() {
        let extra = cuts[i] - prev_cut;
        prev_cut = cuts[i];
        if i > 0 {
            cursor += cfg.min_gap;
        }
        cursor += extra;
        let start = cursor;
        let end = start + len - 1;
        spans.push(EventSpan { start_s: start, end_s: end, label });
        cursor = end + 1;
    }
    spans
}

/// Generate every task corpus of a config. Streams are independent given
/// their derived seeds, so shards reproduce bit-for-bit.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Vec<TaskCorpus>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.tasks.len());
    let mut next_id = 0u32;
    for (ti, task) in cfg.tasks.iter().enumerate() {
        let mut samples = Vec::with_capacity(task.count as usize);
        for si in 0..task.count {
            let seed = stream_seed(cfg.seed, ti, si as usize);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let query_id = task.queries[rng.gen_range(0..task.queries.len())];
            let events = place_events(task, query_id, &mut rng);
            let n_distractors =
                rng.gen_range(task.distractors_min..=task.distractors_max) as usize;
            let mut distractors = Vec::with_capacity(n_distractors);
            for _ in 0..n_distractors {
                let len = rng.gen_range(task.event_len_min..=task.event_len_max);
                let len = len.min(task.length_s);
                let start = rng.gen_range(0..=task.length_s - len);
                let others: Vec<u32> = task
                    .queries
                    .iter()
                    .copied()
                    .filter(|&q| q != query_id)
                    .collect();
                if others.is_empty() {
                    break;
                }
                let label = others[rng.gen_range(0..others.len())];
                distractors.push(EventSpan { start_s: start, end_s: start + len - 1, label });
            }
            let spec = StreamSpec::new(
                next_id,
                task.length_s,
                events,
                query_id,
                cfg.feature_dim,
                cfg.snr,
                cfg.ramp_s,
                distractors,
                seed,
            )?;
            samples.push(generate_sample(&spec)?);
            next_id += 1;
        }
        out.push(TaskCorpus { name: task.name.clone(), samples });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    id: u32,
    length_s: u64,
    query_id: u32,
    events: Vec<(u64, u64)>,
    features: Vec<Vec<f64>>,
}

/// Write one task's streams as JSONL, one record per line, ordered by id.
pub fn write_corpus(path: &Path, samples: &[StreamSample]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = CorpusRecord {
            id: s.spec.id,
            length_s: s.spec.length_s,
            query_id: s.spec.query_id,
            events: s.spec.events.iter().map(|e| (e.start_s, e.end_s)).collect(),
            features: s.features.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL corpus back. Generation-only spec fields (`snr`, `seed`,
/// `ramp_s`, distractors) are not round-tripped; the realized features and
/// events carry all the information evaluation needs.
pub fn read_corpus(path: &Path) -> Result<Vec<StreamSample>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)?;
        let events: Vec<EventSpan> = rec
            .events
            .iter()
            .map(|&(s, e)| EventSpan { start_s: s, end_s: e, label: rec.query_id })
            .collect();
        let feature_dim = rec.features.first().map(|f| f.len()).unwrap_or(0);
        let spec = StreamSpec::new(
            rec.id,
            rec.length_s,
            events,
            rec.query_id,
            feature_dim,
            0.0,
            0,
            Vec::new(),
            0,
        )?;
        let activation_gt = rasterize(&spec.events, spec.length_s)?;
        samples.push(StreamSample { spec, features: rec.features, activation_gt });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::active_spans;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn span(s: u64, e: u64) -> EventSpan {
        EventSpan { start_s: s, end_s: e, label: 0 }
    }

    #[test]
    fn rasterize_examples() {
        assert_eq!(rasterize(&[span(2, 4)], 6).unwrap().to_string(), "001110");
        assert_eq!(rasterize(&[], 4).unwrap().to_string(), "0000");
        assert_eq!(
            rasterize(&[span(0, 0), span(5, 5)], 6).unwrap().to_string(),
            "100001"
        );
        assert!(rasterize(&[span(2, 6)], 6).is_err());
    }

    #[test]
    fn overlapping_events_rejected_at_construction() {
        let err = StreamSpec::new(
            0,
            10,
            vec![span(1, 4), span(4, 6)],
            0,
            4,
            1.0,
            0,
            vec![],
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn noiseless_features_are_separable() {
        let spec = StreamSpec::new(
            0,
            12,
            vec![span(4, 7)],
            1,
            4,
            f64::INFINITY,
            0,
            vec![],
            7,
        )
        .unwrap();
        let feats = emit_features(&spec, &mut rng(0)).unwrap();
        let ch = 1usize; // query 1 -> channel 1
        for (s, f) in feats.iter().enumerate() {
            if (4..=7).contains(&(s as u64)) {
                assert!(f[ch] > 0.5);
            } else {
                assert_eq!(f[ch], 0.0);
            }
        }
    }

    #[test]
    fn zero_snr_features_ignore_events() {
        let mk = |events: Vec<EventSpan>| {
            let spec =
                StreamSpec::new(0, 10, events, 0, 4, 0.0, 0, vec![], 99).unwrap();
            emit_features(&spec, &mut rng(5)).unwrap()
        };
        assert_eq!(mk(vec![span(2, 5)]), mk(vec![]));
    }

    #[test]
    fn features_are_deterministic_under_seed() {
        let spec = StreamSpec::new(0, 20, vec![span(3, 9)], 2, 6, 2.0, 3, vec![], 13).unwrap();
        let a = generate_sample(&spec).unwrap();
        let b = generate_sample(&spec).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn ramp_rises_and_falls() {
        let e = span(10, 19);
        assert!((ramp_amplitude(10, &e, 3) - 1.0 / 3.0).abs() < 1e-12);
        assert!((ramp_amplitude(11, &e, 3) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ramp_amplitude(14, &e, 3), 1.0);
        assert!((ramp_amplitude(19, &e, 3) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(ramp_amplitude(12, &e, 0), 1.0);
    }

    #[test]
    fn training_window_bounds() {
        let mut r = rng(3);
        for _ in 0..200 {
            let (start, len) = sample_training_window(300, 256, &mut r);
            assert!((8..=256).contains(&len));
            assert!(start + len <= 300);
        }
        let (start, len) = sample_training_window(5, 256, &mut r);
        assert_eq!((start, len), (0, 5));

        let mut a = rng(9);
        let mut b = rng(9);
        assert_eq!(
            sample_training_window(120, 64, &mut a),
            sample_training_window(120, 64, &mut b)
        );
    }

    #[test]
    fn cutoff_examples() {
        let mut r = rng(4);
        for _ in 0..100 {
            let c = multi_event_cutoff(10, 20, &mut r).unwrap();
            assert!((11..=20).contains(&c));
        }
        assert_eq!(multi_event_cutoff(10, 11, &mut r).unwrap(), 11);
        assert!(multi_event_cutoff(10, 10, &mut r).is_err());
    }

    #[test]
    fn build_target_examples() {
        // window [10, 20), event (25, 30): entirely outside
        assert_eq!(build_target(10, 10, &[span(25, 30)]).to_string(), "0000000000");
        // window [10, 20), event (12, 15): offsets 2..=5
        assert_eq!(build_target(10, 10, &[span(12, 15)]).to_string(), "0011110000");
        // window inside the event
        assert_eq!(build_target(12, 4, &[span(10, 20)]).to_string(), "1111");
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let cfg = GenConfig {
            feature_dim: 4,
            snr: 2.0,
            ramp_s: 2,
            seed: 21,
            tasks: vec![TaskGenConfig {
                name: "single".into(),
                count: 3,
                length_s: 40,
                n_events: 1,
                event_len_min: 6,
                event_len_max: 10,
                min_gap: 4,
                queries: vec![0, 1],
                distractors_min: 0,
                distractors_max: 1,
            }],
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("single.jsonl");
        write_corpus(&path, &corpus[0].samples).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (orig, loaded) in corpus[0].samples.iter().zip(&back) {
            assert_eq!(orig.spec.id, loaded.spec.id);
            assert_eq!(orig.spec.events, loaded.spec.events);
            assert_eq!(orig.features, loaded.features);
            assert_eq!(orig.activation_gt, loaded.activation_gt);
        }
    }

    #[test]
    fn generation_is_reproducible_bit_for_bit() {
        let cfg = GenConfig {
            feature_dim: 4,
            snr: 3.0,
            ramp_s: 3,
            seed: 77,
            tasks: vec![TaskGenConfig {
                name: "multi".into(),
                count: 4,
                length_s: 60,
                n_events: 2,
                event_len_min: 5,
                event_len_max: 9,
                min_gap: 5,
                queries: vec![0, 1, 2],
                distractors_min: 0,
                distractors_max: 2,
            }],
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        for (x, y) in a[0].samples.iter().zip(&b[0].samples) {
            assert_eq!(x.spec.events, y.spec.events);
            assert_eq!(x.features, y.features);
        }
    }

    #[test]
    fn class_balance_tracks_configured_density() {
        let task = TaskGenConfig {
            name: "balance".into(),
            count: 300,
            length_s: 64,
            n_events: 2,
            event_len_min: 4,
            event_len_max: 12,
            min_gap: 3,
            queries: vec![0],
            distractors_min: 0,
            distractors_max: 0,
        };
        let cfg = GenConfig {
            feature_dim: 2,
            snr: 1.0,
            ramp_s: 0,
            seed: 5,
            tasks: vec![task.clone()],
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let fracs: Vec<f64> = corpus[0]
            .samples
            .iter()
            .map(|s| {
                let active = s
                    .activation_gt
                    .tokens()
                    .iter()
                    .filter(|t| t.as_bool() == Some(true))
                    .count();
                active as f64 / s.spec.length_s as f64
            })
            .collect();
        let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
        let expected = task.expected_active_fraction();
        let var = fracs.iter().map(|f| (f - expected).powi(2)).sum::<f64>() / fracs.len() as f64;
        let se = (var / fracs.len() as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mean {mean} vs expected {expected} (se {se})"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rasterize_inverts_active_spans(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            let s = ActivationSequence::from_bools(&bits);
            let spans = active_spans(&s).unwrap();
            let events: Vec<EventSpan> = spans
                .iter()
                .map(|&(a, b)| EventSpan { start_s: a as u64, end_s: b as u64, label: 0 })
                .collect();
            let back = rasterize(&events, bits.len() as u64).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
