//! Small trainable mask predictor: token/query embeddings, a feature
//! projection, N causal-attention blocks and a 2-class head, all in f64 with
//! hand-written backward passes so gradients can be checked against central
//! finite differences.
//!
//! The trunk (embeddings + attention blocks) is shared with the
//! autoregressive baseline, which swaps the 2-class head for a 1-logit score
//! head.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationSequence, ActivationToken};
use crate::corruption::NoiseLevel;
use crate::denoiser::{duplicate_input, Denoiser, DuplicationMode, PredictorContext, ProbVector, Slot};
use crate::{Error, Result};

const RMS_EPS: f64 = 1e-6;
pub(crate) const CHECKPOINT_VERSION: u32 = 1;

/// Shape hyperparameters of the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_queries: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 2 || !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Config("hidden_dim must be even and >= 2".into()));
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config("hidden_dim must divide evenly into heads".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("need at least one attention block".into()));
        }
        if self.feature_dim == 0 || self.n_queries == 0 {
            return Err(Error::Config("feature_dim and n_queries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Row-major matrix of f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

// out[s x n] += a[s x k] . b[k x n]
fn mm(a: &[f64], s: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), s * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), s * n);
    for i in 0..s {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[s x r] += a[s x c] . b[r x c]^T
fn mm_abt(a: &[f64], s: usize, c: usize, b: &[f64], r: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), s * c);
    debug_assert_eq!(b.len(), r * c);
    debug_assert_eq!(out.len(), s * r);
    for i in 0..s {
        let arow = &a[i * c..(i + 1) * c];
        let orow = &mut out[i * r..(i + 1) * r];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * c..(j + 1) * c];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

// out[r x c] += a[s x r]^T . b[s x c]
fn mm_atb(a: &[f64], s: usize, r: usize, b: &[f64], c: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), s * r);
    debug_assert_eq!(b.len(), s * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..s {
        let arow = &a[i * r..(i + 1) * r];
        let brow = &b[i * c..(i + 1) * c];
        for (j, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[j * c..(j + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn rmsnorm_row(x: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
    inv
}

fn rmsnorm_backward_row(dy: &[f64], y: &[f64], inv: f64, dx: &mut [f64]) {
    let h = y.len() as f64;
    let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
    for ((d, &dyv), &yv) in dx.iter_mut().zip(dy).zip(y) {
        *d += inv * (dyv - yv * dot / h);
    }
}

fn silu(z: f64) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-z).exp());
    (z * s, s * (1.0 + z * (1.0 - s)))
}

fn time_encoding(age: usize, h: usize, out: &mut [f64]) {
    let half = h / 2;
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / h as f64);
        let arg = age as f64 * freq;
        out[2 * i] += arg.sin();
        out[2 * i + 1] += arg.cos();
    }
}

// type-embedding rows
const TYPE_QUERY: usize = 0;
const TYPE_FEATURE: usize = 1;
const TYPE_COND: usize = 2;
const TYPE_SEP: usize = 3;
const TYPE_PRED: usize = 4;
const TYPE_ACT: usize = 5;
const N_TYPES: usize = 6;

fn token_row(tok: ActivationToken) -> usize {
    match tok {
        ActivationToken::Inactive => 0,
        ActivationToken::Active => 1,
        ActivationToken::Masked => 2,
    }
}

/// One attention block: QKV/output projections plus a SiLU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

/// Embeddings plus attention blocks; shared between the mask predictor and
/// the autoregressive score head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkParams {
    pub token_emb: Tensor,
    pub query_emb: Tensor,
    pub feat_proj: Tensor,
    pub feat_bias: Vec<f64>,
    /// Projection for the time-aligned feature added into each activation
    /// slot (additive conditioning alongside the feature slots).
    pub feat_inj: Tensor,
    pub type_emb: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl TrunkParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let h = cfg.hidden_dim;
        let w_std = 1.0 / (h as f64).sqrt();
        let m = 4 * h;
        TrunkParams {
            token_emb: Tensor::randn(3, h, 0.5, rng),
            query_emb: Tensor::randn(cfg.n_queries, h, 0.5, rng),
            feat_proj: Tensor::randn(cfg.feature_dim, h, 1.0 / (cfg.feature_dim as f64).sqrt(), rng),
            feat_bias: vec![0.0; h],
            feat_inj: Tensor::randn(cfg.feature_dim, h, 1.0 / (cfg.feature_dim as f64).sqrt(), rng),
            type_emb: Tensor::randn(N_TYPES, h, 0.5, rng),
            blocks: (0..cfg.n_blocks)
                .map(|_| BlockParams {
                    wq: Tensor::randn(h, h, w_std, rng),
                    wk: Tensor::randn(h, h, w_std, rng),
                    wv: Tensor::randn(h, h, w_std, rng),
                    wo: Tensor::randn(h, h, w_std, rng),
                    w1: Tensor::randn(h, m, w_std, rng),
                    b1: vec![0.0; m],
                    w2: Tensor::randn(m, h, 1.0 / (m as f64).sqrt(), rng),
                    b2: vec![0.0; h],
                })
                .collect(),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        let m = 4 * h;
        TrunkParams {
            token_emb: Tensor::zeros(3, h),
            query_emb: Tensor::zeros(cfg.n_queries, h),
            feat_proj: Tensor::zeros(cfg.feature_dim, h),
            feat_bias: vec![0.0; h],
            feat_inj: Tensor::zeros(cfg.feature_dim, h),
            type_emb: Tensor::zeros(N_TYPES, h),
            blocks: (0..cfg.n_blocks)
                .map(|_| BlockParams {
                    wq: Tensor::zeros(h, h),
                    wk: Tensor::zeros(h, h),
                    wv: Tensor::zeros(h, h),
                    wo: Tensor::zeros(h, h),
                    w1: Tensor::zeros(h, m),
                    b1: vec![0.0; m],
                    w2: Tensor::zeros(m, h),
                    b2: vec![0.0; h],
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            &self.token_emb.data,
            &self.query_emb.data,
            &self.feat_proj.data,
            &self.feat_bias,
            &self.feat_inj.data,
            &self.type_emb.data,
        ];
        for b in &self.blocks {
            v.push(&b.wq.data);
            v.push(&b.wk.data);
            v.push(&b.wv.data);
            v.push(&b.wo.data);
            v.push(&b.w1.data);
            v.push(&b.b1);
            v.push(&b.w2.data);
            v.push(&b.b2);
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.token_emb.data,
            &mut self.query_emb.data,
            &mut self.feat_proj.data,
            &mut self.feat_bias,
            &mut self.feat_inj.data,
            &mut self.type_emb.data,
        ];
        for b in &mut self.blocks {
            v.push(&mut b.wq.data);
            v.push(&mut b.wk.data);
            v.push(&mut b.wv.data);
            v.push(&mut b.wo.data);
            v.push(&mut b.w1.data);
            v.push(&mut b.b1);
            v.push(&mut b.w2.data);
            v.push(&mut b.b2);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

struct BlockTape {
    inv1: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<Vec<f64>>, // per head, S x S row-major (zero above the diagonal)
    ctx: Vec<f64>,
    inv2: Vec<f64>,
    n2: Vec<f64>,
    z1: Vec<f64>,
    h_act: Vec<f64>,
}

pub(crate) struct TrunkTape {
    pub s: usize,
    blocks: Vec<BlockTape>,
    pub nf: Vec<f64>,
    invf: Vec<f64>,
}

fn inject_aligned_feature(
    p: &TrunkParams,
    features: &[Vec<f64>],
    age: usize,
    row: &mut [f64],
) {
    if age >= features.len() {
        return;
    }
    let f = &features[features.len() - 1 - age];
    for (d, &fv) in f.iter().enumerate() {
        if fv == 0.0 {
            continue;
        }
        let prow = p.feat_inj.row(d);
        for (r, &pv) in row.iter_mut().zip(prow) {
            *r += fv * pv;
        }
    }
}

fn inject_aligned_feature_grad(
    grad: &mut TrunkParams,
    features: &[Vec<f64>],
    age: usize,
    drow: &[f64],
) {
    if age >= features.len() {
        return;
    }
    let f = &features[features.len() - 1 - age];
    for (d, &fv) in f.iter().enumerate() {
        if fv == 0.0 {
            continue;
        }
        let grow = grad.feat_inj.row_mut(d);
        for (g, &dr) in grow.iter_mut().zip(drow) {
            *g += fv * dr;
        }
    }
}

fn embed_slots(
    cfg: &ModelConfig,
    p: &TrunkParams,
    slots: &[Slot],
    features: &[Vec<f64>],
    act_emb: Option<&[f64]>,
) -> Vec<f64> {
    let h = cfg.hidden_dim;
    let s = slots.len();
    let mut x = vec![0.0; s * h];
    for (i, slot) in slots.iter().enumerate() {
        let row = &mut x[i * h..(i + 1) * h];
        match *slot {
            Slot::Query(q) => {
                let qrow = p.query_emb.row(q as usize % cfg.n_queries);
                for (r, &e) in row.iter_mut().zip(qrow) {
                    *r += e;
                }
                for (r, &e) in row.iter_mut().zip(p.type_emb.row(TYPE_QUERY)) {
                    *r += e;
                }
            }
            Slot::Feature { index, age } => {
                let f = &features[index];
                for (d, &fv) in f.iter().enumerate() {
                    if fv == 0.0 {
                        continue;
                    }
                    let prow = p.feat_proj.row(d);
                    for (r, &pv) in row.iter_mut().zip(prow) {
                        *r += fv * pv;
                    }
                }
                for ((r, &b), &e) in row
                    .iter_mut()
                    .zip(&p.feat_bias)
                    .zip(p.type_emb.row(TYPE_FEATURE))
                {
                    *r += b + e;
                }
                time_encoding(age, h, row);
            }
            Slot::Cond { token, age } => {
                for ((r, &t), &e) in row
                    .iter_mut()
                    .zip(p.token_emb.row(token_row(token)))
                    .zip(p.type_emb.row(TYPE_COND))
                {
                    *r += t + e;
                }
                inject_aligned_feature(p, features, age, row);
                time_encoding(age, h, row);
            }
            Slot::Sep => {
                for (r, &e) in row.iter_mut().zip(p.type_emb.row(TYPE_SEP)) {
                    *r += e;
                }
            }
            Slot::Pred { token, age } => {
                for ((r, &t), &e) in row
                    .iter_mut()
                    .zip(p.token_emb.row(token_row(token)))
                    .zip(p.type_emb.row(TYPE_PRED))
                {
                    *r += t + e;
                }
                time_encoding(age, h, row);
            }
            Slot::Act { age } => {
                let emb = act_emb.expect("act slot without act embedding");
                for ((r, &a), &e) in row.iter_mut().zip(emb).zip(p.type_emb.row(TYPE_ACT)) {
                    *r += a + e;
                }
                inject_aligned_feature(p, features, age, row);
                time_encoding(age, h, row);
            }
        }
    }
    x
}

pub(crate) fn trunk_forward(
    cfg: &ModelConfig,
    p: &TrunkParams,
    slots: &[Slot],
    features: &[Vec<f64>],
    act_emb: Option<&[f64]>,
) -> TrunkTape {
    let h = cfg.hidden_dim;
    let s = slots.len();
    let nh = cfg.n_heads;
    let hd = h / nh;
    let scale = 1.0 / (hd as f64).sqrt();
    let m = 4 * h;

    let mut x = embed_slots(cfg, p, slots, features, act_emb);
    let mut blocks = Vec::with_capacity(cfg.n_blocks);

    for bp in &p.blocks {
        let mut n1 = vec![0.0; s * h];
        let mut inv1 = vec![0.0; s];
        for i in 0..s {
            inv1[i] = rmsnorm_row(&x[i * h..(i + 1) * h], &mut n1[i * h..(i + 1) * h]);
        }
        let mut q = vec![0.0; s * h];
        let mut k = vec![0.0; s * h];
        let mut v = vec![0.0; s * h];
        mm(&n1, s, h, &bp.wq.data, h, &mut q);
        mm(&n1, s, h, &bp.wk.data, h, &mut k);
        mm(&n1, s, h, &bp.wv.data, h, &mut v);

        let mut att = vec![vec![0.0; s * s]; nh];
        let mut ctx = vec![0.0; s * h];
        for (head, a) in att.iter_mut().enumerate() {
            let off = head * hd;
            for i in 0..s {
                let qrow = &q[i * h + off..i * h + off + hd];
                // causal scores with running max for a stable softmax
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..=i {
                    let krow = &k[j * h + off..j * h + off + hd];
                    let mut dot = 0.0;
                    for (&a1, &b1) in qrow.iter().zip(krow) {
                        dot += a1 * b1;
                    }
                    let sc = dot * scale;
                    a[i * s + j] = sc;
                    if sc > maxv {
                        maxv = sc;
                    }
                }
                let mut denom = 0.0;
                for j in 0..=i {
                    let e = (a[i * s + j] - maxv).exp();
                    a[i * s + j] = e;
                    denom += e;
                }
                let crow = &mut ctx[i * h + off..i * h + off + hd];
                for j in 0..=i {
                    let w = a[i * s + j] / denom;
                    a[i * s + j] = w;
                    let vrow = &v[j * h + off..j * h + off + hd];
                    for (c, &vv) in crow.iter_mut().zip(vrow) {
                        *c += w * vv;
                    }
                }
            }
        }

        let mut attn = vec![0.0; s * h];
        mm(&ctx, s, h, &bp.wo.data, h, &mut attn);
        let mut x2 = x.clone();
        for (a, b) in x2.iter_mut().zip(&attn) {
            *a += b;
        }

        let mut n2 = vec![0.0; s * h];
        let mut inv2 = vec![0.0; s];
        for i in 0..s {
            inv2[i] = rmsnorm_row(&x2[i * h..(i + 1) * h], &mut n2[i * h..(i + 1) * h]);
        }
        let mut z1 = vec![0.0; s * m];
        mm(&n2, s, h, &bp.w1.data, m, &mut z1);
        for i in 0..s {
            for (z, &b) in z1[i * m..(i + 1) * m].iter_mut().zip(&bp.b1) {
                *z += b;
            }
        }
        let mut h_act = vec![0.0; s * m];
        for (ha, &z) in h_act.iter_mut().zip(&z1) {
            *ha = silu(z).0;
        }
        let mut mlp = vec![0.0; s * h];
        mm(&h_act, s, m, &bp.w2.data, h, &mut mlp);
        for i in 0..s {
            for (o, &b) in mlp[i * h..(i + 1) * h].iter_mut().zip(&bp.b2) {
                *o += b;
            }
        }
        let mut x3 = x2.clone();
        for (a, b) in x3.iter_mut().zip(&mlp) {
            *a += b;
        }

        x = x3;
        blocks.push(BlockTape {
            inv1,
            n1,
            q,
            k,
            v,
            att,
            ctx,
            inv2,
            n2,
            z1,
            h_act,
        });
    }

    let mut nf = vec![0.0; s * h];
    let mut invf = vec![0.0; s];
    for i in 0..s {
        invf[i] = rmsnorm_row(&x[i * h..(i + 1) * h], &mut nf[i * h..(i + 1) * h]);
    }
    TrunkTape { s, blocks, nf, invf }
}

pub(crate) struct TrunkBackwardOut {
    pub grad: TrunkParams,
    pub act_emb_grad: Vec<f64>,
}

/// Backpropagate `d_nf` (gradient w.r.t. the final normed rows, dense S x h)
/// through the trunk, accumulating parameter and embedding gradients.
pub(crate) fn trunk_backward(
    cfg: &ModelConfig,
    p: &TrunkParams,
    slots: &[Slot],
    features: &[Vec<f64>],
    tape: &TrunkTape,
    d_nf: &[f64],
) -> TrunkBackwardOut {
    let h = cfg.hidden_dim;
    let s = tape.s;
    let nh = cfg.n_heads;
    let hd = h / nh;
    let scale = 1.0 / (hd as f64).sqrt();
    let m = 4 * h;

    let mut grad = TrunkParams::zeros(cfg);
    let mut act_emb_grad = vec![0.0; h];

    // final norm
    let mut dx = vec![0.0; s * h];
    for i in 0..s {
        rmsnorm_backward_row(
            &d_nf[i * h..(i + 1) * h],
            &tape.nf[i * h..(i + 1) * h],
            tape.invf[i],
            &mut dx[i * h..(i + 1) * h],
        );
    }

    for (bp, bt, gb) in itertools_rev(&p.blocks, &tape.blocks, &mut grad.blocks) {
        // x3 = x2 + mlp(n2(x2)); dx currently holds d(x3)
        let dmlp = dx.clone();
        let mut dx2 = dx;

        // MLP backward
        let mut dh = vec![0.0; s * m];
        mm_abt(&dmlp, s, h, &bp.w2.data, m, &mut dh);
        mm_atb(&bt.h_act, s, m, &dmlp, h, &mut gb.w2.data);
        for i in 0..s {
            for (g, &d) in gb.b2.iter_mut().zip(&dmlp[i * h..(i + 1) * h]) {
                *g += d;
            }
        }
        let mut dz1 = vec![0.0; s * m];
        for ((dz, &dhv), &z) in dz1.iter_mut().zip(&dh).zip(&bt.z1) {
            *dz = dhv * silu(z).1;
        }
        mm_atb(&bt.n2, s, h, &dz1, m, &mut gb.w1.data);
        for i in 0..s {
            for (g, &d) in gb.b1.iter_mut().zip(&dz1[i * m..(i + 1) * m]) {
                *g += d;
            }
        }
        let mut dn2 = vec![0.0; s * h];
        mm_abt(&dz1, s, m, &bp.w1.data, h, &mut dn2);
        for i in 0..s {
            rmsnorm_backward_row(
                &dn2[i * h..(i + 1) * h],
                &bt.n2[i * h..(i + 1) * h],
                bt.inv2[i],
                &mut dx2[i * h..(i + 1) * h],
            );
        }

        // x2 = x + ctx.Wo; dx2 holds d(x2)
        let dattn = dx2.clone();
        let mut dx_prev = dx2;

        let mut dctx = vec![0.0; s * h];
        mm_abt(&dattn, s, h, &bp.wo.data, h, &mut dctx);
        mm_atb(&bt.ctx, s, h, &dattn, h, &mut gb.wo.data);

        let mut dq = vec![0.0; s * h];
        let mut dk = vec![0.0; s * h];
        let mut dv = vec![0.0; s * h];
        for head in 0..nh {
            let off = head * hd;
            let a = &bt.att[head];
            for i in 0..s {
                let dcrow = &dctx[i * h + off..i * h + off + hd];
                // dA and the softmax Jacobian, row i
                let mut da = vec![0.0; i + 1];
                let mut inner = 0.0;
                for (j, daj) in da.iter_mut().enumerate() {
                    let vrow = &bt.v[j * h + off..j * h + off + hd];
                    let mut dot = 0.0;
                    for (&d1, &v1) in dcrow.iter().zip(vrow) {
                        dot += d1 * v1;
                    }
                    *daj = dot;
                    inner += a[i * s + j] * dot;
                    // dV
                    let w = a[i * s + j];
                    if w != 0.0 {
                        let dvrow = &mut dv[j * h + off..j * h + off + hd];
                        for (dvv, &d1) in dvrow.iter_mut().zip(dcrow) {
                            *dvv += w * d1;
                        }
                    }
                }
                let qrow = &bt.q[i * h + off..i * h + off + hd];
                for (j, &daj) in da.iter().enumerate() {
                    let ds = a[i * s + j] * (daj - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &bt.k[j * h + off..j * h + off + hd];
                    let dqrow = &mut dq[i * h + off..i * h + off + hd];
                    for (dqv, &kv) in dqrow.iter_mut().zip(krow) {
                        *dqv += ds * kv;
                    }
                    let dkrow = &mut dk[j * h + off..j * h + off + hd];
                    for (dkv, &qv) in dkrow.iter_mut().zip(qrow) {
                        *dkv += ds * qv;
                    }
                }
            }
        }

        let mut dn1 = vec![0.0; s * h];
        mm_abt(&dq, s, h, &bp.wq.data, h, &mut dn1);
        mm_abt(&dk, s, h, &bp.wk.data, h, &mut dn1);
        mm_abt(&dv, s, h, &bp.wv.data, h, &mut dn1);
        mm_atb(&bt.n1, s, h, &dq, h, &mut gb.wq.data);
        mm_atb(&bt.n1, s, h, &dk, h, &mut gb.wk.data);
        mm_atb(&bt.n1, s, h, &dv, h, &mut gb.wv.data);
        for i in 0..s {
            rmsnorm_backward_row(
                &dn1[i * h..(i + 1) * h],
                &bt.n1[i * h..(i + 1) * h],
                bt.inv1[i],
                &mut dx_prev[i * h..(i + 1) * h],
            );
        }
        dx = dx_prev;
    }

    // embedding gradients from d(x0)
    for (i, slot) in slots.iter().enumerate() {
        let drow = &dx[i * h..(i + 1) * h];
        match *slot {
            Slot::Query(q) => {
                let grow = grad.query_emb.row_mut(q as usize % cfg.n_queries);
                for (g, &d) in grow.iter_mut().zip(drow) {
                    *g += d;
                }
                for (g, &d) in grad.type_emb.row_mut(TYPE_QUERY).iter_mut().zip(drow) {
                    *g += d;
                }
            }
            Slot::Feature { index, .. } => {
                let f = &features[index];
                for (d, &fv) in f.iter().enumerate() {
                    if fv == 0.0 {
                        continue;
                    }
                    let grow = grad.feat_proj.row_mut(d);
                    for (g, &dr) in grow.iter_mut().zip(drow) {
                        *g += fv * dr;
                    }
                }
                for (g, &d) in grad.feat_bias.iter_mut().zip(drow) {
                    *g += d;
                }
                for (g, &d) in grad.type_emb.row_mut(TYPE_FEATURE).iter_mut().zip(drow) {
                    *g += d;
                }
            }
            Slot::Cond { token, age } => {
                for (g, &d) in grad.token_emb.row_mut(token_row(token)).iter_mut().zip(drow) {
                    *g += d;
                }
                for (g, &d) in grad.type_emb.row_mut(TYPE_COND).iter_mut().zip(drow) {
                    *g += d;
                }
                inject_aligned_feature_grad(&mut grad, features, age, drow);
            }
            Slot::Sep => {
                for (g, &d) in grad.type_emb.row_mut(TYPE_SEP).iter_mut().zip(drow) {
                    *g += d;
                }
            }
            Slot::Pred { token, .. } => {
                for (g, &d) in grad.token_emb.row_mut(token_row(token)).iter_mut().zip(drow) {
                    *g += d;
                }
                for (g, &d) in grad.type_emb.row_mut(TYPE_PRED).iter_mut().zip(drow) {
                    *g += d;
                }
            }
            Slot::Act { age } => {
                for (g, &d) in act_emb_grad.iter_mut().zip(drow) {
                    *g += d;
                }
                for (g, &d) in grad.type_emb.row_mut(TYPE_ACT).iter_mut().zip(drow) {
                    *g += d;
                }
                inject_aligned_feature_grad(&mut grad, features, age, drow);
            }
        }
    }

    TrunkBackwardOut { grad, act_emb_grad }
}

// reverse zip of blocks for the backward pass
fn itertools_rev<'a>(
    params: &'a [BlockParams],
    tapes: &'a [BlockTape],
    grads: &'a mut [BlockParams],
) -> impl Iterator<Item = (&'a BlockParams, &'a BlockTape, &'a mut BlockParams)> {
    params
        .iter()
        .rev()
        .zip(tapes.iter().rev())
        .zip(grads.iter_mut().rev())
        .map(|((p, t), g)| (p, t, g))
}

/// The trainable mask predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralDenoiser {
    pub cfg: ModelConfig,
    pub trunk: TrunkParams,
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
    pub duplication: DuplicationMode,
}

/// Gradient container matching [`NeuralDenoiser`]'s parameters.
pub(crate) struct NeuralGrad {
    pub trunk: TrunkParams,
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
}

impl NeuralGrad {
    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.push(&mut self.head_w.data);
        v.push(&mut self.head_b);
        v
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    kind: String,
    model: NeuralDenoiser,
}

impl NeuralDenoiser {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let trunk = TrunkParams::init(&cfg, &mut rng);
        let h = cfg.hidden_dim;
        let head_w = Tensor::randn(h, 2, 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(NeuralDenoiser {
            cfg,
            trunk,
            head_w,
            head_b: vec![0.0; 2],
            duplication: DuplicationMode::Enabled,
        })
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.head_w.data.len() + self.head_b.len()
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.push(&mut self.head_w.data);
        v.push(&mut self.head_b);
        v
    }

    fn check_features(&self, ctx: &PredictorContext) -> Result<()> {
        for f in ctx.features {
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

    fn forward(&self, ctx: &PredictorContext) -> Result<(crate::denoiser::ModelLayout, TrunkTape, Vec<[f64; 2]>)> {
        self.check_features(ctx)?;
        // consume exactly the window-aligned features, matching the
        // training-time conditioning span
        let w = ctx.window.len();
        let feats = &ctx.features[ctx.features.len() - w..];
        let ctx = PredictorContext::new(ctx.query_id, feats, ctx.window)?;
        let layout = duplicate_input(&ctx, self.duplication);
        let tape = trunk_forward(&self.cfg, &self.trunk, &layout.slots, ctx.features, None);
        let h = self.cfg.hidden_dim;
        let logits: Vec<[f64; 2]> = (0..layout.window_len)
            .map(|j| {
                let row = &tape.nf[(layout.pred_start + j) * h..(layout.pred_start + j + 1) * h];
                let mut l = [self.head_b[0], self.head_b[1]];
                for (r, &x) in row.iter().enumerate() {
                    l[0] += x * self.head_w.data[r * 2];
                    l[1] += x * self.head_w.data[r * 2 + 1];
                }
                l
            })
            .collect();
        Ok((layout, tape, logits))
    }

    /// Masked cross-entropy and its gradient for one training example.
    /// `mask[j]` marks positions contributing to the loss; `t` supplies the
    /// `1/t` weight.
    pub(crate) fn loss_and_grad(
        &self,
        ctx: &PredictorContext,
        target: &ActivationSequence,
        mask: &[bool],
        t: NoiseLevel,
    ) -> Result<(f64, NeuralGrad)> {
        if target.len() != ctx.window.len() || mask.len() != target.len() {
            return Err(Error::InvalidArgument("target/mask length mismatch".into()));
        }
        let any_masked = mask.iter().any(|&m| m);
        if t.value() == 0.0 && any_masked {
            return Err(Error::InvalidArgument(
                "1/t weight undefined at t = 0 with masked positions".into(),
            ));
        }
        let (layout, tape, logits) = self.forward(ctx)?;
        let h = self.cfg.hidden_dim;
        let weight = if t.value() > 0.0 { 1.0 / t.value() } else { 0.0 };

        let mut loss = 0.0;
        let mut d_nf = vec![0.0; tape.s * h];
        let mut g_head_w = Tensor::zeros(h, 2);
        let mut g_head_b = vec![0.0; 2];

        for j in 0..layout.window_len {
            if !mask[j] {
                continue;
            }
            let y = target
                .get(j)
                .and_then(|tok| tok.as_bool())
                .ok_or_else(|| Error::InvalidArgument(format!("target masked at {j}")))?;
            let l = logits[j];
            let maxv = l[0].max(l[1]);
            let lse = maxv + ((l[0] - maxv).exp() + (l[1] - maxv).exp()).ln();
            let yi = usize::from(y);
            loss += weight * (lse - l[yi]);
            let p0 = (l[0] - lse).exp();
            let p1 = (l[1] - lse).exp();
            let dl = [
                weight * (p0 - if y { 0.0 } else { 1.0 }),
                weight * (p1 - if y { 1.0 } else { 0.0 }),
            ];
            let row_idx = layout.pred_start + j;
            let nf_row = &tape.nf[row_idx * h..(row_idx + 1) * h];
            let drow = &mut d_nf[row_idx * h..(row_idx + 1) * h];
            for r in 0..h {
                drow[r] += dl[0] * self.head_w.data[r * 2] + dl[1] * self.head_w.data[r * 2 + 1];
                g_head_w.data[r * 2] += nf_row[r] * dl[0];
                g_head_w.data[r * 2 + 1] += nf_row[r] * dl[1];
            }
            g_head_b[0] += dl[0];
            g_head_b[1] += dl[1];
        }

        let out = trunk_backward(&self.cfg, &self.trunk, &layout.slots, ctx.features, &tape, &d_nf);
        Ok((loss, NeuralGrad { trunk: out.grad, head_w: g_head_w, head_b: g_head_b }))
    }

    /// Masked cross-entropy of one example, without gradients.
    pub fn loss(
        &self,
        ctx: &PredictorContext,
        target: &ActivationSequence,
        mask: &[bool],
        t: NoiseLevel,
    ) -> Result<f64> {
        if target.len() != ctx.window.len() || mask.len() != target.len() {
            return Err(Error::InvalidArgument("target/mask length mismatch".into()));
        }
        let any_masked = mask.iter().any(|&m| m);
        if t.value() == 0.0 && any_masked {
            return Err(Error::InvalidArgument(
                "1/t weight undefined at t = 0 with masked positions".into(),
            ));
        }
        let (layout, _, logits) = self.forward(ctx)?;
        let weight = if t.value() > 0.0 { 1.0 / t.value() } else { 0.0 };
        let mut loss = 0.0;
        for j in 0..layout.window_len {
            if !mask[j] {
                continue;
            }
            let y = target
                .get(j)
                .and_then(|tok| tok.as_bool())
                .ok_or_else(|| Error::InvalidArgument(format!("target masked at {j}")))?;
            let l = logits[j];
            let maxv = l[0].max(l[1]);
            let lse = maxv + ((l[0] - maxv).exp() + (l[1] - maxv).exp()).ln();
            loss += weight * (lse - l[usize::from(y)]);
        }
        Ok(loss)
    }

    /// Analytic loss gradient flattened in parameter order; pairs with
    /// [`param_vector`](Self::param_vector) for gradient checking.
    pub fn loss_gradient_flat(
        &self,
        ctx: &PredictorContext,
        target: &ActivationSequence,
        mask: &[bool],
        t: NoiseLevel,
    ) -> Result<Vec<f64>> {
        let (_, mut grad) = self.loss_and_grad(ctx, target, mask, t)?;
        let mut flat = Vec::new();
        for s in grad.slices_mut() {
            flat.extend_from_slice(s);
        }
        Ok(flat)
    }

    /// All parameters as one flat vector, in a stable order.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut m = self.clone();
        let mut flat = Vec::with_capacity(m.param_count());
        for s in m.slices_mut() {
            flat.extend_from_slice(s);
        }
        flat
    }

    /// Overwrite all parameters from a flat vector produced by
    /// [`param_vector`](Self::param_vector).
    pub fn set_param_vector(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        assert_eq!(offset, flat.len(), "parameter vector length mismatch");
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let w = BufWriter::new(file);
        serde_json::to_writer(
            w,
            &CheckpointFile {
                version: CHECKPOINT_VERSION,
                kind: "diffusion".into(),
                model: self.clone(),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let r = BufReader::new(file);
        let ckpt: CheckpointFile = serde_json::from_reader(r)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt.kind != "diffusion" {
            return Err(Error::Config(format!(
                "checkpoint kind {:?} is not a mask predictor",
                ckpt.kind
            )));
        }
        ckpt.model.cfg.validate()?;
        Ok(ckpt.model)
    }
}

impl Denoiser for NeuralDenoiser {
    fn predict(&self, ctx: &PredictorContext) -> Result<ProbVector> {
        let (_, _, logits) = self.forward(ctx)?;
        let p = logits
            .iter()
            .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
            .collect();
        ProbVector::new(p)
    }
}
