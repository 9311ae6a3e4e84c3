//! Segment-level F1 and boundary-aligned transition histograms.

use serde::{Deserialize, Serialize};

use crate::activation::EventSpan;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatchConfig {
    pub iou_threshold: f64,
}

impl Default for SegmentMatchConfig {
    fn default() -> Self {
        SegmentMatchConfig { iou_threshold: 0.5 }
    }
}

impl SegmentMatchConfig {
    pub fn new(iou_threshold: f64) -> Result<Self> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "iou threshold {iou_threshold} outside (0, 1]"
            )));
        }
        Ok(SegmentMatchConfig { iou_threshold })
    }
}

/// Span IoU over inclusive `(start, end)` second pairs: real-line overlap
/// length against the inclusive hull, so `iou((2,5),(3,6)) = 2/5` and a span
/// of n seconds matches itself at `(n-1)/n`. Non-overlapping spans score 0.
pub fn span_iou(a: (u64, u64), b: (u64, u64)) -> f64 {
    let inter_hi = a.1.min(b.1);
    let inter_lo = a.0.max(b.0);
    if inter_hi <= inter_lo {
        return 0.0;
    }
    let inter = (inter_hi - inter_lo) as f64;
    let hull = (a.1.max(b.1) - a.0.min(b.0) + 1) as f64;
    inter / hull
}

/// Greedy one-to-one matching in descending IoU; a pair counts as a true
/// positive iff its IoU reaches the threshold. `F1 = 2TP/(2TP+FP+FN)`;
/// empty predictions against empty ground truth score 1.
pub fn segment_f1(pred: &[(u64, u64)], gt: &[(u64, u64)], cfg: &SegmentMatchConfig) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &p) in pred.iter().enumerate() {
        for (j, &g) in gt.iter().enumerate() {
            let iou = span_iou(p, g);
            if iou >= cfg.iou_threshold {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut tp = 0usize;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            tp += 1;
        }
    }
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

pub const PRE_WINDOW_S: u64 = 60;
pub const POST_WINDOW_S: u64 = 60;

/// Transition counts aligned to event boundaries: 60 one-second bins before
/// onset, 101 normalized-progress bins during the event, 60 one-second bins
/// after offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionHistogram {
    pub pre: Vec<u64>,
    pub during: Vec<u64>,
    pub post: Vec<u64>,
}

impl Default for TransitionHistogram {
    fn default() -> Self {
        TransitionHistogram {
            pre: vec![0; PRE_WINDOW_S as usize],
            during: vec![0; 101],
            post: vec![0; POST_WINDOW_S as usize],
        }
    }
}

impl TransitionHistogram {
    pub fn pre_total(&self) -> u64 {
        self.pre.iter().sum()
    }

    pub fn during_total(&self) -> u64 {
        self.during.iter().sum()
    }

    pub fn post_total(&self) -> u64 {
        self.post.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.pre_total() + self.during_total() + self.post_total()
    }

    pub fn merge(&mut self, other: &TransitionHistogram) {
        for (a, b) in self.pre.iter_mut().zip(&other.pre) {
            *a += b;
        }
        for (a, b) in self.during.iter_mut().zip(&other.during) {
            *a += b;
        }
        for (a, b) in self.post.iter_mut().zip(&other.post) {
            *a += b;
        }
    }
}

/// Indices `s` where `decisions[s-1] != decisions[s]`.
pub fn transition_points(decisions: &[bool]) -> Vec<u64> {
    (1..decisions.len())
        .filter(|&s| decisions[s - 1] != decisions[s])
        .map(|s| s as u64)
        .collect()
}

/// Bin every decision transition relative to each event: pre-event
/// `[onset-60, onset)`, during-event by progress percent, post-event
/// `(offset, offset+60]`. Transitions outside every region are dropped;
/// multi-event streams accumulate per event.
pub fn transition_histogram(decisions: &[bool], events: &[EventSpan]) -> TransitionHistogram {
    let mut hist = TransitionHistogram::default();
    let points = transition_points(decisions);
    for e in events {
        let onset = e.start_s;
        let offset = e.end_s;
        for &s in &points {
            if s < onset {
                let back = onset - s;
                if back <= PRE_WINDOW_S {
                    hist.pre[(PRE_WINDOW_S - back) as usize] += 1;
                }
            } else if s <= offset {
                let dur = offset - onset;
                let progress = if dur == 0 {
                    0.0
                } else {
                    (s - onset) as f64 / dur as f64
                };
                let bin = (progress * 100.0).round() as usize;
                hist.during[bin.min(100)] += 1;
            } else {
                let fwd = s - offset;
                if fwd <= POST_WINDOW_S {
                    hist.post[(fwd - 1) as usize] += 1;
                }
            }
        }
    }
    hist
}
