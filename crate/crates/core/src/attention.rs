//! Bounded self-attention.
//!
//! Scores are `Q Kᵀ / sqrt(d_k)` plus an additive bias that is 0 on allowed
//! pairs and `-inf` on masked ones, so masked weights come out of the softmax
//! as exact zeros while each row still sums to one. The same mask is shared by
//! every head and the returned weights are the mean over heads.
//!
//! Cross-frame attention flattens `B x N x C` features frame-major into one
//! sequence of `B * N` tokens, attends jointly, and reshapes the result back.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::masks::{AttentionMask, MaskScope, SubjectMask, TokenGrid};
use crate::plan::SubjectId;
use crate::rng;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values after {stage}")]
    NonFinite { stage: &'static str },
    #[error("invalid projections: {0}")]
    Projection(String),
}

/// Query/key/value projections `C -> d`, split into `heads` heads of
/// `d_k = d / heads`, and an optional output projection `d -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Option<Array2<f64>>,
    heads: usize,
}

impl ProjectionSet {
    pub fn new(
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        w_o: Option<Array2<f64>>,
        heads: usize,
    ) -> Result<Self, AttentionError> {
        let (c, d) = w_q.dim();
        if w_k.dim() != (c, d) || w_v.dim() != (c, d) {
            return Err(AttentionError::Projection(format!(
                "w_q {:?}, w_k {:?} and w_v {:?} must share one shape",
                w_q.dim(),
                w_k.dim(),
                w_v.dim()
            )));
        }
        if c == 0 || d == 0 || heads == 0 || d % heads != 0 {
            return Err(AttentionError::Projection(format!(
                "model width {d} is not divisible into {heads} head(s)"
            )));
        }
        match &w_o {
            Some(w) if w.dim() != (d, c) => {
                return Err(AttentionError::Projection(format!(
                    "w_o must be {d}x{c}, got {:?}",
                    w.dim()
                )))
            }
            None if d != c => {
                return Err(AttentionError::Projection(format!(
                    "an identity output projection needs d == C, got d={d}, C={c}"
                )))
            }
            _ => {}
        }
        let all_finite = [&w_q, &w_k, &w_v]
            .into_iter()
            .chain(w_o.as_ref())
            .all(|w| w.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(AttentionError::Projection("weights must be finite".into()));
        }
        Ok(ProjectionSet {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    /// Gaussian weights with variance `1 / C`, no output projection.
    pub fn seeded(channels: usize, heads: usize, seed: u64) -> Result<Self, AttentionError> {
        let mut draws = rng::stream(&[seed, 0x7072_6f6a]);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut gen = || {
            Array2::from_shape_simple_fn((channels, channels), || {
                scale * draws.sample::<f64, _>(StandardNormal)
            })
        };
        let (w_q, w_k, w_v) = (gen(), gen(), gen());
        Self::new(w_q, w_k, w_v, None, heads)
    }

    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    pub fn w_q(&self) -> &Array2<f64> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Array2<f64> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Array2<f64> {
        &self.w_v
    }

    pub fn w_o(&self) -> Option<&Array2<f64>> {
        self.w_o.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// `B x N x C` (B = 1 for intra-frame attention).
    pub output: Array3<f64>,
    /// Head-averaged post-softmax weights, `N x N` or `BN x BN`.
    pub weights: Array2<f64>,
    pub scope: MaskScope,
}

fn ensure_finite<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    stage: &'static str,
) -> Result<(), AttentionError> {
    if values.into_iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AttentionError::NonFinite { stage })
    }
}

/// Row-wise softmax of `scores + log(mask)`.
pub fn masked_softmax(
    scores: ArrayView2<'_, f64>,
    mask: &AttentionMask,
) -> Result<Array2<f64>, AttentionError> {
    let (rows, cols) = scores.dim();
    if rows != cols || rows != mask.size() {
        return Err(AttentionError::Shape(format!(
            "scores {rows}x{cols} against a {n}x{n} mask",
            n = mask.size()
        )));
    }
    ensure_finite(scores.iter(), "scores")?;
    let mut out = Array2::zeros((rows, cols));
    let mut biased = vec![0.0; cols];
    for (i, (srow, mut orow)) in scores.rows().into_iter().zip(out.rows_mut()).enumerate() {
        for ((b, &s), &allowed) in biased.iter_mut().zip(srow).zip(mask.row(i)) {
            *b = if allowed { s } else { s + f64::NEG_INFINITY };
        }
        let max = biased.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(AttentionError::NonFinite { stage: "softmax" });
        }
        let mut sum = 0.0;
        for (o, &b) in orow.iter_mut().zip(&biased) {
            let e = (b - max).exp();
            *o = e;
            sum += e;
        }
        orow.mapv_inplace(|e| e / sum);
    }
    Ok(out)
}

/// Multi-head masked attention over one token sequence.
fn attend(
    x: ArrayView2<'_, f64>,
    proj: &ProjectionSet,
    mask: &AttentionMask,
) -> Result<(Array2<f64>, Array2<f64>), AttentionError> {
    let (tokens, channels) = x.dim();
    if channels != proj.channels() {
        return Err(AttentionError::Shape(format!(
            "features have {channels} channels, projections expect {}",
            proj.channels()
        )));
    }
    if tokens != mask.size() {
        return Err(AttentionError::Shape(format!(
            "{tokens} tokens against a {n}x{n} mask",
            n = mask.size()
        )));
    }
    ensure_finite(x.iter(), "input")?;

    let q = x.dot(&proj.w_q);
    let k = x.dot(&proj.w_k);
    let v = x.dot(&proj.w_v);
    ensure_finite(q.iter().chain(&k).chain(&v), "projection")?;

    let dk = proj.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads_out = Array2::zeros((tokens, proj.model_dim()));
    let mut weights = Array2::zeros((tokens, tokens));
    for h in 0..proj.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let a = masked_softmax(scores.view(), mask)?;
        heads_out.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        weights += &a;
    }
    if proj.heads > 1 {
        weights /= proj.heads as f64;
    }
    let out = match &proj.w_o {
        Some(w_o) => heads_out.dot(w_o),
        None => heads_out,
    };
    ensure_finite(out.iter(), "output")?;
    Ok((out, weights))
}

/// Intra-frame bounded attention for one frame's `N x C` features.
pub fn bounded_self_attention(
    features: ArrayView2<'_, f64>,
    proj: &ProjectionSet,
    mask: &AttentionMask,
) -> Result<AttentionResult, AttentionError> {
    let (out, weights) = attend(features, proj, mask)?;
    let (n, c) = out.dim();
    Ok(AttentionResult {
        output: out
            .into_shape_with_order((1, n, c))
            .expect("contiguous output"),
        weights,
        scope: mask.scope(),
    })
}

/// Joint attention over all frames of `B x N x C` features with a
/// `BN x BN` mask.
pub fn cross_frame_bounded_attention(
    features: ArrayView3<'_, f64>,
    proj: &ProjectionSet,
    mask: &AttentionMask,
) -> Result<AttentionResult, AttentionError> {
    let (b, n, c) = features.dim();
    let flat = features
        .to_shape((b * n, c))
        .map_err(|e| AttentionError::Shape(e.to_string()))?;
    let (out, weights) = attend(flat.view(), proj, mask)?;
    let c_out = out.ncols();
    Ok(AttentionResult {
        output: out
            .into_shape_with_order((b, n, c_out))
            .expect("contiguous output"),
        weights,
        scope: mask.scope(),
    })
}

/// Brute-force single-head reference: double loop, max subtraction over the
/// allowed entries, weighted sum of `v`.
pub fn oracle_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: &AttentionMask,
) -> Array2<f64> {
    let n = q.nrows();
    let dk = q.ncols();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Array2::zeros((n, v.ncols()));
    for i in 0..n {
        let mut scores = vec![f64::NEG_INFINITY; n];
        for (j, score) in scores.iter_mut().enumerate() {
            if mask.get(i, j) {
                let mut dot = 0.0;
                for t in 0..dk {
                    dot += q[[i, t]] * k[[j, t]];
                }
                *score = dot * scale;
            }
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut weights = vec![0.0; n];
        for j in 0..n {
            if mask.get(i, j) {
                weights[j] = (scores[j] - max).exp();
                total += weights[j];
            }
        }
        for j in 0..n {
            if weights[j] != 0.0 {
                for t in 0..v.ncols() {
                    out[[i, t]] += weights[j] / total * v[[j, t]];
                }
            }
        }
    }
    out
}

fn naive_matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut acc = 0.0;
            for t in 0..a.ncols() {
                acc += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Multi-head reference built only from loops and [`oracle_attention`]:
/// project, attend head by head, concatenate, apply the output projection.
/// `x` holds all tokens, frame-major for cross-frame masks.
pub fn oracle_multi_head(
    x: ArrayView2<'_, f64>,
    proj: &ProjectionSet,
    mask: &AttentionMask,
) -> Array2<f64> {
    let q = naive_matmul(x, proj.w_q.view());
    let k = naive_matmul(x, proj.w_k.view());
    let v = naive_matmul(x, proj.w_v.view());
    let dk = proj.head_dim();
    let mut concat = Array2::zeros((x.nrows(), proj.model_dim()));
    for h in 0..proj.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let o = oracle_attention(q.slice(cols), k.slice(cols), v.slice(cols), mask);
        concat.slice_mut(cols).assign(&o);
    }
    match &proj.w_o {
        Some(w_o) => naive_matmul(concat.view(), w_o.view()),
        None => concat,
    }
}

/// Per-subject attention leakage: over the tokens of subject `k` (in every
/// frame the weights cover), the mean attention mass that lands on tokens of
/// other subjects. A target counts as leakage only if it shares no subject
/// with the source token, so overlapping regions do not leak into
/// themselves.
///
/// `weights` may be cross-frame (`BN x BN`, frame-major) or intra-frame
/// (`N x N`, all masks from one frame).
pub fn leakage_fraction(
    weights: ArrayView2<'_, f64>,
    masks: &[SubjectMask],
    grid: &TokenGrid,
) -> Result<BTreeMap<SubjectId, f64>, AttentionError> {
    let (rows, cols) = weights.dim();
    let n = grid.tokens();
    if rows != cols {
        return Err(AttentionError::Shape(format!("weights are {rows}x{cols}")));
    }
    let cross = rows == grid.total_tokens();
    if !cross {
        if rows != n {
            return Err(AttentionError::Shape(format!(
                "{rows}x{rows} weights fit neither {n} nor {} tokens",
                grid.total_tokens()
            )));
        }
        if masks.windows(2).any(|w| w[0].frame() != w[1].frame()) {
            return Err(AttentionError::Shape(
                "intra-frame weights need masks from a single frame".into(),
            ));
        }
    }

    let ids: Vec<&SubjectId> = {
        let mut v: Vec<_> = masks.iter().map(|m| m.subject()).collect();
        v.sort();
        v.dedup();
        v
    };
    let words = ids.len().div_ceil(64).max(1);
    let mut membership = vec![0u64; rows * words];
    for m in masks {
        if m.bits().len() != n {
            return Err(AttentionError::Shape(format!(
                "subject mask has {} tokens, grid has {n}",
                m.bits().len()
            )));
        }
        let k = ids.binary_search(&m.subject()).expect("subject indexed");
        let offset = if cross { m.frame() * n } else { 0 };
        for t in m.tokens() {
            membership[(offset + t) * words + k / 64] |= 1 << (k % 64);
        }
    }
    let member = |t: usize| &membership[t * words..(t + 1) * words];
    let occupied: Vec<usize> = (0..rows)
        .filter(|&t| member(t).iter().any(|&w| w != 0))
        .collect();

    let mut out = BTreeMap::new();
    for (k, id) in ids.iter().enumerate() {
        let mut total = 0.0;
        let mut sources = 0usize;
        for i in 0..rows {
            let mi = member(i);
            if mi[k / 64] & (1 << (k % 64)) == 0 {
                continue;
            }
            sources += 1;
            let row = weights.row(i);
            total += occupied
                .iter()
                .filter(|&&j| member(j).iter().zip(mi).all(|(a, b)| a & b == 0))
                .map(|&j| row[j])
                .sum::<f64>();
        }
        let value = if sources == 0 {
            0.0
        } else {
            total / sources as f64
        };
        out.insert((*id).clone(), value.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Stacks per-frame intra weights into a block-diagonal `BN x BN` matrix.
pub fn block_diagonal_weights(blocks: &[Array2<f64>]) -> Array2<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let total = n * blocks.len();
    let mut out = Array2::zeros((total, total));
    for (l, b) in blocks.iter().enumerate() {
        out.slice_mut(s![l * n..(l + 1) * n, l * n..(l + 1) * n])
            .assign(b);
    }
    out
}

/// Frame `l` of a `B x N x C` tensor as an `N x C` view.
pub fn frame(features: ArrayView3<'_, f64>, l: usize) -> ArrayView2<'_, f64> {
    features.index_axis_move(Axis(0), l)
}

/// Max absolute elementwise difference.
pub fn max_abs_diff<D: ndarray::Dimension>(
    a: &ndarray::Array<f64, D>,
    b: &ndarray::Array<f64, D>,
) -> f64 {
    let mut m = 0.0f64;
    Zip::from(a)
        .and(b)
        .for_each(|x, y| m = m.max((x - y).abs()));
    m
}
