//! Forward masking process: independent per-position masking plus the three
//! structured strategies used for training (boundary-anchored block masking,
//! span unmasking, full masking), mixed uniformly, and the multi-event
//! inactive override.
//!
//! All draws go through an explicit seeded RNG, so identical
//! `(sequence, noise level, seed)` inputs give bit-identical outputs.
//! Wherever a real-valued count is discretized, rounding is
//! half-away-from-zero (`f64::round`).

use rand::Rng;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::activation::{ActivationSequence, ActivationToken};
use crate::{Error, Result};

/// Corruption severity in `[0, 1]`: 0 leaves the sequence untouched, 1 masks
/// everything.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "noise level {t} outside [0, 1]"
            )));
        }
        Ok(NoiseLevel(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which corruption pattern produced a record. The training mixture draws
/// only from the three structured strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    Independent,
    BoundarySpan,
    SpanUnmask,
    Full,
}

/// A corrupted sequence together with how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRecord {
    pub masked_seq: ActivationSequence,
    pub strategy: MaskingStrategy,
    pub t: NoiseLevel,
    pub masked_count: usize,
}

impl Serialize for CorruptionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("CorruptionRecord", 3)?;
        s.serialize_field("masked", &self.masked_seq.to_string())?;
        s.serialize_field("strategy", &self.strategy)?;
        s.serialize_field("t", &self.t.value())?;
        s.end()
    }
}

impl CorruptionRecord {
    fn new(masked_seq: ActivationSequence, strategy: MaskingStrategy, t: NoiseLevel) -> Self {
        let masked_count = masked_seq.masked_count();
        CorruptionRecord {
            masked_seq,
            strategy,
            t,
            masked_count,
        }
    }
}

fn require_unmasked(seq: &ActivationSequence) -> Result<()> {
    if !seq.is_resolved() {
        return Err(Error::InvalidArgument(
            "input sequence already contains masked tokens".into(),
        ));
    }
    Ok(())
}

fn require_nonempty(seq: &ActivationSequence) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    Ok(())
}

/// Indices `i` such that a transition (`0↔1`) sits between positions `i` and
/// `i+1` of a resolved sequence.
pub fn boundaries(seq: &ActivationSequence) -> Vec<usize> {
    let toks = seq.tokens();
    (0..toks.len().saturating_sub(1))
        .filter(|&i| toks[i] != toks[i + 1])
        .collect()
}

/// Distance from position `x` to the nearest side of the nearest transition,
/// or `None` when the sequence is homogeneous.
fn boundary_distance(x: usize, bounds: &[usize]) -> Option<usize> {
    bounds
        .iter()
        .map(|&i| {
            let d_left = x.abs_diff(i);
            let d_right = x.abs_diff(i + 1);
            d_left.min(d_right)
        })
        .min()
}

/// Replace each position by `M` independently with probability `t`.
pub fn mask_independent<R: Rng>(
    seq: &ActivationSequence,
    t: NoiseLevel,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    require_unmasked(seq)?;
    let tokens = seq
        .tokens()
        .iter()
        .map(|&tok| {
            if rng.gen::<f64>() < t.value() {
                ActivationToken::Masked
            } else {
                tok
            }
        })
        .collect();
    Ok(CorruptionRecord::new(
        ActivationSequence::new(tokens),
        MaskingStrategy::Independent,
        t,
    ))
}

/// Mask one contiguous block of length `max(1, round(t·len))`, placed
/// uniformly among positions that touch at least one transition. A
/// homogeneous sequence (no transition) falls back to uniform placement.
pub fn mask_boundary_span<R: Rng>(
    seq: &ActivationSequence,
    t: NoiseLevel,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    require_unmasked(seq)?;
    require_nonempty(seq)?;
    let len = seq.len();
    let block_len = ((t.value() * len as f64).round() as usize).clamp(1, len);
    let bounds = boundaries(seq);
    let starts = boundary_block_starts(len, block_len, &bounds);
    let start = starts[rng.gen_range(0..starts.len())];
    let tokens = seq
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            if i >= start && i < start + block_len {
                ActivationToken::Masked
            } else {
                tok
            }
        })
        .collect();
    Ok(CorruptionRecord::new(
        ActivationSequence::new(tokens),
        MaskingStrategy::BoundarySpan,
        t,
    ))
}

/// Valid start indices for a masked block of `block_len`: those whose block
/// contains a side of at least one transition, or every start when there is
/// no transition.
pub fn boundary_block_starts(len: usize, block_len: usize, bounds: &[usize]) -> Vec<usize> {
    let all: Vec<usize> = (0..=len - block_len).collect();
    if bounds.is_empty() {
        return all;
    }
    let touching: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&s| {
            bounds
                .iter()
                .any(|&b| (s <= b && b < s + block_len) || (s <= b + 1 && b + 1 < s + block_len))
        })
        .collect();
    if touching.is_empty() {
        all
    } else {
        touching
    }
}

/// Start from a fully masked sequence and reveal one contiguous block of
/// `max(0, round((1−t)·len))` positions, none of which may lie within
/// `margin` of a transition. If no placement exists at the target length the
/// revealed block shrinks until one does (possibly to zero).
pub fn mask_span_unmask<R: Rng>(
    seq: &ActivationSequence,
    t: NoiseLevel,
    margin: usize,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    require_unmasked(seq)?;
    require_nonempty(seq)?;
    let len = seq.len();
    let target = (((1.0 - t.value()) * len as f64).round() as usize).min(len);
    let bounds = boundaries(seq);
    let allowed: Vec<bool> = (0..len)
        .map(|x| match boundary_distance(x, &bounds) {
            Some(d) => d >= margin,
            None => true,
        })
        .collect();

    let mut revealed: Option<(usize, usize)> = None;
    let mut reveal_len = target;
    while reveal_len > 0 {
        let starts = legal_reveal_starts(&allowed, reveal_len);
        if !starts.is_empty() {
            let start = starts[rng.gen_range(0..starts.len())];
            revealed = Some((start, reveal_len));
            break;
        }
        reveal_len -= 1;
    }

    let tokens: Vec<ActivationToken> = (0..len)
        .map(|i| match revealed {
            Some((s, l)) if i >= s && i < s + l => seq.tokens()[i],
            _ => ActivationToken::Masked,
        })
        .collect();
    Ok(CorruptionRecord::new(
        ActivationSequence::new(tokens),
        MaskingStrategy::SpanUnmask,
        t,
    ))
}

/// Start indices of contiguous `reveal_len` blocks that avoid every
/// margin-excluded position.
pub fn legal_reveal_starts(allowed: &[bool], reveal_len: usize) -> Vec<usize> {
    if reveal_len == 0 || reveal_len > allowed.len() {
        return Vec::new();
    }
    (0..=allowed.len() - reveal_len)
        .filter(|&s| allowed[s..s + reveal_len].iter().all(|&a| a))
        .collect()
}

/// Mask every position; `t` is recorded as 1. Idempotent on already-masked
/// input.
pub fn mask_full(seq: &ActivationSequence) -> CorruptionRecord {
    CorruptionRecord::new(
        ActivationSequence::fully_masked(seq.len()),
        MaskingStrategy::Full,
        NoiseLevel::new(1.0).expect("1.0 is a valid noise level"),
    )
}

/// Draw one structured strategy uniformly from
/// `{BoundarySpan, SpanUnmask, Full}` and apply it; the first two draw
/// `t ~ U[0,1]`.
///
/// Draw order is fixed (strategy index, then `t`) so seeded runs reproduce.
pub fn sample_training_corruption<R: Rng>(
    seq: &ActivationSequence,
    margin: usize,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    require_unmasked(seq)?;
    require_nonempty(seq)?;
    match rng.gen_range(0..3u8) {
        0 => {
            let t = NoiseLevel::new(rng.gen::<f64>())?;
            mask_boundary_span(seq, t, rng)
        }
        1 => {
            let t = NoiseLevel::new(rng.gen::<f64>())?;
            mask_span_unmask(seq, t, margin, rng)
        }
        _ => Ok(mask_full(seq)),
    }
}

/// Force every position with index `< cutoff_idx` to Inactive, overriding
/// masked slots, and update the masked count.
pub fn apply_inactive_override(rec: &CorruptionRecord, cutoff_idx: usize) -> Result<CorruptionRecord> {
    if cutoff_idx > rec.masked_seq.len() {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_idx} out of range for length {}",
            rec.masked_seq.len()
        )));
    }
    let tokens = rec
        .masked_seq
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            if i < cutoff_idx {
                ActivationToken::Inactive
            } else {
                tok
            }
        })
        .collect();
    Ok(CorruptionRecord::new(
        ActivationSequence::new(tokens),
        rec.strategy,
        rec.t,
    ))
}
