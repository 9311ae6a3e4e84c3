//! Core activation types: tokens, sequences, the sliding window, event spans
//! and trigger decisions.
//!
//! Conventions used throughout the crate:
//! - one position == one second of stream time;
//! - sequence index `i` of a window whose newest position sits at stream
//!   second `anchor` refers to second `anchor - (len - 1 - i)`;
//! - spans are inclusive on both ends, in indices and in serialized form.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// One activation state for a single one-second position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationToken {
    /// The queried event is not happening at this position (`0`).
    Inactive,
    /// The queried event is happening at this position (`1`).
    Active,
    /// Unresolved position awaiting denoising (`M`).
    Masked,
}

impl ActivationToken {
    pub fn as_char(self) -> char {
        match self {
            ActivationToken::Inactive => '0',
            ActivationToken::Active => '1',
            ActivationToken::Masked => 'M',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c {
            '0' => Ok(ActivationToken::Inactive),
            '1' => Ok(ActivationToken::Active),
            'M' => Ok(ActivationToken::Masked),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation token {other:?}"
            ))),
        }
    }

    pub fn from_bool(active: bool) -> Self {
        if active {
            ActivationToken::Active
        } else {
            ActivationToken::Inactive
        }
    }

    /// `Some(true)` for Active, `Some(false)` for Inactive, `None` for Masked.
    pub fn as_bool(self) -> Option<bool> {
        match self {
            ActivationToken::Inactive => Some(false),
            ActivationToken::Active => Some(true),
            ActivationToken::Masked => None,
        }
    }

    pub fn is_masked(self) -> bool {
        matches!(self, ActivationToken::Masked)
    }
}

/// An ordered run of activation tokens over consecutive one-second positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ActivationSequence {
    tokens: Vec<ActivationToken>,
}

impl ActivationSequence {
    pub fn new(tokens: Vec<ActivationToken>) -> Self {
        ActivationSequence { tokens }
    }

    pub fn from_bools(values: &[bool]) -> Self {
        ActivationSequence {
            tokens: values.iter().map(|&b| ActivationToken::from_bool(b)).collect(),
        }
    }

    pub fn fully_masked(len: usize) -> Self {
        ActivationSequence {
            tokens: vec![ActivationToken::Masked; len],
        }
    }

    /// Parse the text form over the alphabet `{0,1,M}`, e.g. `"0011MM10"`.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .chars()
            .map(ActivationToken::from_char)
            .collect::<Result<Vec<_>>>()?;
        Ok(ActivationSequence { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[ActivationToken] {
        &self.tokens
    }

    pub fn get(&self, idx: usize) -> Option<ActivationToken> {
        self.tokens.get(idx).copied()
    }

    pub fn set(&mut self, idx: usize, token: ActivationToken) {
        self.tokens[idx] = token;
    }

    pub fn push(&mut self, token: ActivationToken) {
        self.tokens.push(token);
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_masked()).count()
    }

    pub fn is_resolved(&self) -> bool {
        self.tokens.iter().all(|t| !t.is_masked())
    }

    /// Indices of all masked positions, ascending.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.is_masked().then_some(i))
            .collect()
    }

    /// Resolved values as booleans. Errors if any position is masked.
    pub fn as_bools(&self) -> Result<Vec<bool>> {
        self.tokens
            .iter()
            .map(|t| t.as_bool().ok_or(Error::UnresolvedSequence))
            .collect()
    }
}

impl fmt::Display for ActivationSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tokens {
            write!(f, "{}", t.as_char())?;
        }
        Ok(())
    }
}

impl Serialize for ActivationSequence {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ActivationSequence {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        ActivationSequence::parse(&text).map_err(D::Error::custom)
    }
}

/// Maximal runs of `Active`, as inclusive `(start_idx, end_idx)` pairs.
///
/// The sequence must be fully resolved.
pub fn active_spans(seq: &ActivationSequence) -> Result<Vec<(usize, usize)>> {
    if !seq.is_resolved() {
        return Err(Error::UnresolvedSequence);
    }
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, t) in seq.tokens().iter().enumerate() {
        match (t, run_start) {
            (ActivationToken::Active, None) => run_start = Some(i),
            (ActivationToken::Inactive, Some(s)) => {
                spans.push((s, i - 1));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        spans.push((s, seq.len() - 1));
    }
    Ok(spans)
}

/// A contiguous event occurrence in stream seconds, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpan {
    pub start_s: u64,
    pub end_s: u64,
    pub label: u32,
}

impl EventSpan {
    pub fn new(start_s: u64, end_s: u64, label: u32) -> Result<Self> {
        if start_s > end_s {
            return Err(Error::InvalidArgument(format!(
                "span start {start_s} exceeds end {end_s}"
            )));
        }
        Ok(EventSpan { start_s, end_s, label })
    }

    pub fn len_s(&self) -> u64 {
        self.end_s - self.start_s + 1
    }

    pub fn contains(&self, second: u64) -> bool {
        second >= self.start_s && second <= self.end_s
    }
}

/// Outcome of a trigger check at one stream second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub fired: bool,
    pub time_s: u64,
    /// Length of the maximal Active run ending at the newest position.
    pub span_len: usize,
}

/// Sliding window of at most `capacity` one-second positions.
///
/// `probs[j]` holds, for a resolved position, the probability the predictor
/// assigned to the resolved value at its last evaluation; for a masked
/// position it holds the most recent predicted probability-of-Active
/// (0.5 before any prediction has been made).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationWindow {
    seq: ActivationSequence,
    probs: Vec<f64>,
    capacity: usize,
    anchor: Option<u64>,
}

/// Placeholder probability for masked slots that have never been evaluated.
pub const UNEVALUATED_PROB: f64 = 0.5;

/// Build an empty window with the given positive capacity.
pub fn new_window(capacity: usize) -> Result<ActivationWindow> {
    if capacity == 0 {
        return Err(Error::InvalidArgument("window capacity must be >= 1".into()));
    }
    Ok(ActivationWindow {
        seq: ActivationSequence::default(),
        probs: Vec::new(),
        capacity,
        anchor: None,
    })
}

impl ActivationWindow {
    /// Wrap an existing sequence as a window; probabilities start at the
    /// unevaluated placeholder.
    pub fn from_sequence(
        seq: ActivationSequence,
        capacity: usize,
        anchor: Option<u64>,
    ) -> Result<Self> {
        if capacity == 0 || seq.len() > capacity {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} does not fit capacity {capacity}",
                seq.len()
            )));
        }
        let probs = vec![UNEVALUATED_PROB; seq.len()];
        Ok(ActivationWindow { seq, probs, capacity, anchor })
    }

    /// Fully masked window of `len` positions anchored at `anchor`.
    pub fn fully_masked(capacity: usize, len: usize, anchor: u64) -> Result<Self> {
        if capacity == 0 || len > capacity {
            return Err(Error::InvalidArgument(format!(
                "bad window shape: len {len}, capacity {capacity}"
            )));
        }
        Ok(ActivationWindow {
            seq: ActivationSequence::fully_masked(len),
            probs: vec![UNEVALUATED_PROB; len],
            capacity,
            anchor: Some(anchor),
        })
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn anchor(&self) -> Option<u64> {
        self.anchor
    }

    pub fn seq(&self) -> &ActivationSequence {
        &self.seq
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn token(&self, idx: usize) -> ActivationToken {
        self.seq.tokens()[idx]
    }

    /// Stream second of position `idx`, if the window is anchored.
    pub fn second_of(&self, idx: usize) -> Option<u64> {
        let anchor = self.anchor?;
        let back = (self.len() - 1 - idx) as u64;
        Some(anchor - back)
    }

    pub fn is_fully_resolved(&self) -> bool {
        self.seq.is_resolved()
    }

    /// Advance the window by one second: append a masked slot, evicting the
    /// oldest position once the capacity is reached. Carried-forward tokens
    /// keep their values and probabilities.
    pub fn shift_append(&self) -> Self {
        let next = match self.anchor {
            Some(a) => a + 1,
            None => 0,
        };
        self.shift_append_at(next)
    }

    /// Like [`shift_append`](Self::shift_append) with an explicit stream
    /// second for the new slot.
    pub fn shift_append_at(&self, second: u64) -> Self {
        let mut seq = self.seq.clone();
        let mut probs = self.probs.clone();
        if seq.len() == self.capacity {
            seq = ActivationSequence::new(seq.tokens()[1..].to_vec());
            probs.remove(0);
        }
        seq.push(ActivationToken::Masked);
        probs.push(UNEVALUATED_PROB);
        ActivationWindow {
            seq,
            probs,
            capacity: self.capacity,
            anchor: Some(second),
        }
    }

    /// Commit a resolved value at `idx`. `prob_of_value` is the probability
    /// the predictor assigned to that value.
    pub fn commit(&mut self, idx: usize, active: bool, prob_of_value: f64) {
        self.seq.set(idx, ActivationToken::from_bool(active));
        self.probs[idx] = prob_of_value;
    }

    /// Return position `idx` to the masked state, carrying the latest
    /// predicted probability-of-Active.
    pub fn remask(&mut self, idx: usize, prob_active: f64) {
        self.seq.set(idx, ActivationToken::Masked);
        self.probs[idx] = prob_active;
    }

    /// Refresh the stored probability of an existing position without
    /// changing its token.
    pub fn set_prob(&mut self, idx: usize, prob: f64) {
        self.probs[idx] = prob;
    }
}

/// Check the span-ratio trigger condition on a fully resolved window.
///
/// The qualifying run must end at the newest position: a stale span that
/// already terminated does not re-fire.
pub fn check_trigger(window: &ActivationWindow, gamma: usize) -> Result<TriggerDecision> {
    if gamma == 0 {
        return Err(Error::InvalidArgument("gamma must be >= 1".into()));
    }
    if !window.is_fully_resolved() {
        return Err(Error::UnresolvedSequence);
    }
    let tokens = window.seq().tokens();
    let span_len = tokens
        .iter()
        .rev()
        .take_while(|t| **t == ActivationToken::Active)
        .count();
    Ok(TriggerDecision {
        fired: span_len >= gamma,
        time_s: window.anchor().unwrap_or(0),
        span_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(text: &str) -> ActivationSequence {
        ActivationSequence::parse(text).unwrap()
    }

    fn window_from(text: &str, capacity: usize) -> ActivationWindow {
        let mut w = new_window(capacity).unwrap();
        for (i, c) in text.chars().enumerate() {
            w = w.shift_append_at(i as u64);
            let idx = w.len() - 1;
            match ActivationToken::from_char(c).unwrap() {
                ActivationToken::Active => w.commit(idx, true, 1.0),
                ActivationToken::Inactive => w.commit(idx, false, 1.0),
                ActivationToken::Masked => {}
            }
        }
        w
    }

    #[test]
    fn token_chars_round_trip() {
        for t in [
            ActivationToken::Inactive,
            ActivationToken::Active,
            ActivationToken::Masked,
        ] {
            assert_eq!(ActivationToken::from_char(t.as_char()).unwrap(), t);
        }
        assert!(ActivationToken::from_char('x').is_err());
    }

    #[test]
    fn sequence_text_form() {
        let s = seq("0011MM10");
        assert_eq!(s.to_string(), "0011MM10");
        assert_eq!(s.len(), 8);
        assert_eq!(s.masked_count(), 2);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "\"0011MM10\"");
        let back: ActivationSequence = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn new_window_cases() {
        let w = new_window(256).unwrap();
        assert_eq!(w.len(), 0);
        assert_eq!(w.capacity(), 256);
        assert!(w.anchor().is_none());

        let w = new_window(1).unwrap();
        assert_eq!(w.capacity(), 1);

        assert!(matches!(new_window(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shift_append_growth_phase() {
        let w = window_from("110", 4);
        let w2 = w.shift_append();
        assert_eq!(w2.seq().to_string(), "110M");
        assert_eq!(w2.anchor(), Some(3));
    }

    #[test]
    fn shift_append_evicts_oldest_at_capacity() {
        let w = window_from("1100", 4);
        let w2 = w.shift_append();
        assert_eq!(w2.seq().to_string(), "100M");
        // carried-forward probabilities move with their tokens
        assert_eq!(w2.probs()[..3], w.probs()[1..4]);
    }

    #[test]
    fn shift_append_on_empty_window() {
        let w = new_window(4).unwrap();
        let w2 = w.shift_append();
        assert_eq!(w2.seq().to_string(), "M");
        assert_eq!(w2.anchor(), Some(0));
    }

    #[test]
    fn active_spans_examples() {
        assert_eq!(active_spans(&seq("01101")).unwrap(), vec![(1, 2), (4, 4)]);
        assert_eq!(active_spans(&seq("000")).unwrap(), Vec::<(usize, usize)>::new());
        assert!(matches!(
            active_spans(&seq("1M1")),
            Err(Error::UnresolvedSequence)
        ));
    }

    #[test]
    fn check_trigger_examples() {
        let w = window_from("0111", 8);
        let d = check_trigger(&w, 1).unwrap();
        assert!(d.fired);
        assert_eq!(d.span_len, 3);

        let d = check_trigger(&w, 4).unwrap();
        assert!(!d.fired);
        assert_eq!(d.span_len, 3);

        let w = window_from("1110", 8);
        let d = check_trigger(&w, 1).unwrap();
        assert!(!d.fired);
        assert_eq!(d.span_len, 0);
    }

    #[test]
    fn check_trigger_requires_resolved_window() {
        let w = window_from("01M", 8);
        assert!(matches!(check_trigger(&w, 1), Err(Error::UnresolvedSequence)));
    }

    #[test]
    fn event_span_validation() {
        assert!(EventSpan::new(3, 2, 0).is_err());
        let e = EventSpan::new(2, 4, 7).unwrap();
        assert_eq!(e.len_s(), 3);
        assert!(e.contains(2) && e.contains(4) && !e.contains(5));
    }

    #[test]
    fn window_second_mapping() {
        let w = window_from("0110", 8);
        assert_eq!(w.anchor(), Some(3));
        assert_eq!(w.second_of(3), Some(3));
        assert_eq!(w.second_of(0), Some(0));
    }

    proptest! {
        #[test]
        fn capacity_bound_holds_under_any_shift_sequence(cap in 1usize..8, n in 0usize..40) {
            let mut w = new_window(cap).unwrap();
            for _ in 0..n {
                w = w.shift_append();
                prop_assert!(w.len() <= w.capacity());
            }
        }

        #[test]
        fn active_spans_partition_the_active_set(bits in proptest::collection::vec(any::<bool>(), 0..64)) {
            let s = ActivationSequence::from_bools(&bits);
            let spans = active_spans(&s).unwrap();
            let mut covered = vec![false; bits.len()];
            for (a, b) in &spans {
                prop_assert!(a <= b);
                for i in *a..=*b {
                    prop_assert!(bits[i]);
                    prop_assert!(!covered[i], "spans overlap");
                    covered[i] = true;
                }
                // maximality
                if *a > 0 {
                    prop_assert!(!bits[a - 1]);
                }
                if *b + 1 < bits.len() {
                    prop_assert!(!bits[b + 1]);
                }
            }
            for (i, &active) in bits.iter().enumerate() {
                prop_assert_eq!(active, covered[i]);
            }
        }

        #[test]
        fn trigger_monotone_in_gamma(bits in proptest::collection::vec(any::<bool>(), 1..32), g1 in 1usize..6, extra in 0usize..6) {
            let mut w = new_window(bits.len()).unwrap();
            for (i, b) in bits.iter().enumerate() {
                w = w.shift_append_at(i as u64);
                let idx = w.len() - 1;
                w.commit(idx, *b, 1.0);
            }
            let g2 = g1 + extra;
            let d1 = check_trigger(&w, g1).unwrap();
            let d2 = check_trigger(&w, g2).unwrap();
            if d2.fired {
                prop_assert!(d1.fired);
            }
        }

        #[test]
        fn sequence_serialization_round_trips(tokens in proptest::collection::vec(0u8..3, 0..64)) {
            let s = ActivationSequence::new(
                tokens.iter().map(|t| match t {
                    0 => ActivationToken::Inactive,
                    1 => ActivationToken::Active,
                    _ => ActivationToken::Masked,
                }).collect(),
            );
            let text = s.to_string();
            prop_assert_eq!(ActivationSequence::parse(&text).unwrap(), s);
        }
    }
}
