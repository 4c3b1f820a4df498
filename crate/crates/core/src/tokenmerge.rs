//! Cross-frame token merging driven by the cross-frame attention weights.
//!
//! Each token is matched to the token in a *different* frame that it attends
//! to most strongly, then blended with it:
//! `merged = (1 - alpha) * src + alpha * src[target]`. A positive `alpha`
//! pulls matched tokens together; a negative one pushes them apart, which is
//! used early in denoising to keep poses varied. [`MergeSchedule`] makes
//! `alpha` a function of the timestep.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{SubjectMask, TokenGrid};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("cannot view {rows}x{cols} weights as {frames} frame(s) of {tokens} token(s)")]
    Shape {
        rows: usize,
        cols: usize,
        frames: usize,
        tokens: usize,
    },
    #[error("merge match covers {expected} tokens but the features have {actual}")]
    MatchMismatch { expected: usize, actual: usize },
    #[error("alpha must lie in [-1, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("merge window [{t_low}, {t_high}] is empty")]
    EmptyWindow { t_high: u32, t_low: u32 },
    #[error("merge windows [{0}, {1}] and [{2}, {3}] overlap")]
    Overlap(u32, u32, u32, u32),
}

/// Attention weights viewed as `B x N x B x N` with every same-frame block
/// zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeGate {
    values: Array4<f64>,
}

impl MergeGate {
    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    /// Gate row of flat source token `p` over all `BN` candidates.
    pub fn row(&self, p: usize) -> ndarray::ArrayView1<'_, f64> {
        let (b, n, _, _) = self.values.dim();
        let flat = self
            .values
            .view()
            .into_shape_with_order((b * n, b * n))
            .expect("gate is contiguous");
        flat.index_axis_move(Axis(0), p)
    }
}

/// Zeroes the same-frame blocks of `BN x BN` weights.
pub fn build_merge_gate(
    weights: ArrayView2<'_, f64>,
    frames: usize,
    tokens: usize,
) -> Result<MergeGate, MergeError> {
    let (rows, cols) = weights.dim();
    if frames == 0 || tokens == 0 || rows != cols || rows != frames * tokens {
        return Err(MergeError::Shape {
            rows,
            cols,
            frames,
            tokens,
        });
    }
    let mut values = weights
        .to_owned()
        .into_shape_with_order((frames, tokens, frames, tokens))
        .expect("standard layout");
    for l in 0..frames {
        values.slice_mut(ndarray::s![l, .., l, ..]).fill(0.0);
    }
    Ok(MergeGate { values })
}

/// Where a token takes its merge partner from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchTarget {
    /// No cross-frame candidate carries weight; the token is left alone.
    SelfToken,
    /// Flat index `frame * N + token` and the gate value at the match.
    Token { index: usize, score: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeMatch {
    frames: usize,
    tokens: usize,
    targets: Vec<MatchTarget>,
}

impl MergeMatch {
    pub fn targets(&self) -> &[MatchTarget] {
        &self.targets
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Number of tokens with a cross-frame partner.
    pub fn matched(&self) -> usize {
        self.targets
            .iter()
            .filter(|t| matches!(t, MatchTarget::Token { .. }))
            .count()
    }
}

fn argmax_row(row: impl Iterator<Item = (usize, f64)>) -> MatchTarget {
    let mut best = MatchTarget::SelfToken;
    let mut best_score = 0.0;
    for (q, score) in row {
        // strict comparison keeps the lowest index on ties
        if score > best_score {
            best_score = score;
            best = MatchTarget::Token { index: q, score };
        }
    }
    best
}

/// For every source token, the cross-frame token with the largest gate
/// weight (lowest flat index on ties), or [`MatchTarget::SelfToken`] when the
/// whole gate row is zero.
///
/// Attention weights are non-negative, so the argmax of the gate equals the
/// argmax of the weights multiplied elementwise by the gate.
pub fn match_tokens(gate: &MergeGate) -> MergeMatch {
    let total = gate.frames() * gate.tokens();
    let targets = (0..total)
        .map(|p| argmax_row(gate.row(p).iter().copied().enumerate()))
        .collect();
    MergeMatch {
        frames: gate.frames(),
        tokens: gate.tokens(),
        targets,
    }
}

/// [`match_tokens`] restricted to candidates that share a subject with the
/// source token. Tokens outside every subject region stay unmatched.
pub fn match_tokens_same_subject(
    gate: &MergeGate,
    masks: &[SubjectMask],
    grid: &TokenGrid,
) -> Result<MergeMatch, MergeError> {
    let n = gate.tokens();
    if grid.tokens() != n || grid.frame_count() != gate.frames() {
        return Err(MergeError::Shape {
            rows: gate.frames() * n,
            cols: gate.frames() * n,
            frames: grid.frame_count(),
            tokens: grid.tokens(),
        });
    }
    let total = gate.frames() * n;
    let mut subjects: Vec<&crate::plan::SubjectId> = masks.iter().map(|m| m.subject()).collect();
    subjects.sort();
    subjects.dedup();
    let mut member: Vec<Vec<usize>> = vec![Vec::new(); total];
    for m in masks {
        let k = subjects.binary_search(&m.subject()).expect("indexed");
        for t in m.tokens() {
            member[m.frame() * n + t].push(k);
        }
    }
    let shares = |a: &[usize], b: &[usize]| a.iter().any(|k| b.contains(k));
    let targets = (0..total)
        .map(|p| {
            argmax_row(
                gate.row(p)
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|&(q, _)| shares(&member[p], &member[q])),
            )
        })
        .collect();
    Ok(MergeMatch {
        frames: gate.frames(),
        tokens: n,
        targets,
    })
}

/// Blends every matched token with its partner's source value. Unmatched
/// tokens pass through, and `alpha == 0` returns `src` unchanged.
pub fn merge_tokens(
    src: ArrayView3<'_, f64>,
    matches: &MergeMatch,
    alpha: f64,
) -> Result<Array3<f64>, MergeError> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(MergeError::InvalidAlpha(alpha));
    }
    let (b, n, c) = src.dim();
    if (b, n) != (matches.frames, matches.tokens) {
        return Err(MergeError::MatchMismatch {
            expected: matches.frames * matches.tokens,
            actual: b * n,
        });
    }
    if alpha == 0.0 {
        return Ok(src.to_owned());
    }
    let flat: Array2<f64> = src
        .to_shape((b * n, c))
        .expect("features reshape")
        .to_owned();
    let mut out = flat.clone();
    for (p, target) in matches.targets.iter().enumerate() {
        if let MatchTarget::Token { index, .. } = *target {
            let partner = flat.row(index);
            out.row_mut(p)
                .zip_mut_with(&partner, |o, &t| *o = (1.0 - alpha) * *o + alpha * t);
        }
    }
    Ok(out
        .into_shape_with_order((b, n, c))
        .expect("contiguous output"))
}

/// `alpha` on the closed timestep interval `[t_low, t_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeWindow {
    pub t_high: u32,
    pub t_low: u32,
    pub alpha: f64,
}

impl MergeWindow {
    pub fn contains(&self, t: u32) -> bool {
        self.t_low <= t && t <= self.t_high
    }
}

/// Piecewise-constant `alpha(t)`; zero outside every window.
///
/// Windows may share an endpoint but not overlap otherwise. A shared
/// endpoint belongs to the window with the larger `t_high`, i.e. the one
/// reached first while denoising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MergeWindow>", into = "Vec<MergeWindow>")]
pub struct MergeSchedule {
    windows: Vec<MergeWindow>,
}

impl MergeSchedule {
    pub fn new(windows: Vec<MergeWindow>) -> Result<Self, MergeError> {
        for w in &windows {
            if w.t_high <= w.t_low {
                return Err(MergeError::EmptyWindow {
                    t_high: w.t_high,
                    t_low: w.t_low,
                });
            }
            if !(-1.0..=1.0).contains(&w.alpha) {
                return Err(MergeError::InvalidAlpha(w.alpha));
            }
        }
        for (i, a) in windows.iter().enumerate() {
            for b in &windows[i + 1..] {
                if a.t_low < b.t_high && b.t_low < a.t_high {
                    return Err(MergeError::Overlap(a.t_low, a.t_high, b.t_low, b.t_high));
                }
            }
        }
        Ok(MergeSchedule { windows })
    }

    /// Never merges.
    pub fn empty() -> Self {
        MergeSchedule {
            windows: Vec::new(),
        }
    }

    /// `alpha = -0.5` on `[950, 1000]`, `0.4` on `[600, 950)`, zero below 600.
    pub fn standard() -> Self {
        MergeSchedule {
            windows: vec![
                MergeWindow {
                    t_high: 1000,
                    t_low: 950,
                    alpha: -0.5,
                },
                MergeWindow {
                    t_high: 950,
                    t_low: 600,
                    alpha: 0.4,
                },
            ],
        }
    }

    pub fn windows(&self) -> &[MergeWindow] {
        &self.windows
    }

    /// The same schedule with every negative-alpha window dropped.
    pub fn without_negative_windows(&self) -> Self {
        MergeSchedule {
            windows: self
                .windows
                .iter()
                .copied()
                .filter(|w| w.alpha >= 0.0)
                .collect(),
        }
    }

    pub fn alpha_at(&self, t: u32) -> f64 {
        self.windows
            .iter()
            .filter(|w| w.contains(t))
            .max_by_key(|w| w.t_high)
            .map_or(0.0, |w| w.alpha)
    }
}

impl Default for MergeSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

impl TryFrom<Vec<MergeWindow>> for MergeSchedule {
    type Error = MergeError;

    fn try_from(windows: Vec<MergeWindow>) -> Result<Self, Self::Error> {
        Self::new(windows)
    }
}

impl From<MergeSchedule> for Vec<MergeWindow> {
    fn from(s: MergeSchedule) -> Self {
        s.windows
    }
}
