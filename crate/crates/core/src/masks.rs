//! Token-level subject masks and the attention masks built from them.
//!
//! Token `(r, c)` of a `H x W` grid is flattened row-major to `r * W + c`.
//! Cross-frame token indices are frame-major: token `i` of frame `l` sits at
//! `l * N + i` with `N = H * W`. Frames are 0-based here; plans number them
//! from 1.
//!
//! An attention mask allows the pair `(i, j)` when both tokens lie in the
//! region of the same subject. Any other pair is allowed when the dropout
//! draw `u(i, j) ~ U(0, 1)` exceeds `beta_d`, so an off-region pair survives
//! with probability `1 - beta_d`. The diagonal is always allowed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use rand::distr::{Distribution, Open01};
use thiserror::Error;

use crate::plan::{BoundingBox, PlanError, StoryboardPlan, SubjectId};
use crate::rng;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid token grid {height}x{width} with {frames} frame(s)")]
    InvalidGrid {
        height: usize,
        width: usize,
        frames: usize,
    },
    #[error("subject mask for `{subject}` in frame {frame} is empty")]
    EmptyMask { frame: usize, subject: SubjectId },
    #[error("mask has {actual} tokens but the grid has {expected}")]
    GridMismatch { expected: usize, actual: usize },
    #[error("frame {frame} is outside a grid of {frames} frame(s)")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("intra-frame masks must share one frame, found frames {first} and {other}")]
    MixedFrames { first: usize, other: usize },
    #[error("subject `{subject}` has two masks in frame {frame}")]
    DuplicateSubject { frame: usize, subject: SubjectId },
    #[error("resampling across different frame counts ({from} -> {to})")]
    FrameCountMismatch { from: usize, to: usize },
    #[error("beta_d must lie in [0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("attention mask must be {size}x{size} with a set diagonal")]
    InvalidMask { size: usize },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Token resolution of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    frame_count: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, frame_count: usize) -> Result<Self, MaskError> {
        if height == 0 || width == 0 || frame_count == 0 {
            return Err(MaskError::InvalidGrid {
                height,
                width,
                frames: frame_count,
            });
        }
        Ok(TokenGrid {
            height,
            width,
            frame_count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    /// Tokens per frame.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Tokens across all frames.
    pub fn total_tokens(&self) -> usize {
        self.tokens() * self.frame_count
    }

    /// Normalised centre of token `index` within its frame, as `(x, y)`.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (r, c) = (index / self.width, index % self.width);
        (
            (c as f64 + 0.5) / self.width as f64,
            (r as f64 + 0.5) / self.height as f64,
        )
    }
}

/// Binary occupancy of one subject in one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectMask {
    frame: usize,
    subject: SubjectId,
    bits: Vec<bool>,
}

impl SubjectMask {
    pub fn new(frame: usize, subject: SubjectId, bits: Vec<bool>) -> Result<Self, MaskError> {
        if !bits.iter().any(|&b| b) {
            return Err(MaskError::EmptyMask { frame, subject });
        }
        Ok(SubjectMask {
            frame,
            subject,
            bits,
        })
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn subject(&self) -> &SubjectId {
        &self.subject
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of the covered tokens, ascending.
    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<(), MaskError> {
        if self.bits.len() != grid.tokens() {
            return Err(MaskError::GridMismatch {
                expected: grid.tokens(),
                actual: self.bits.len(),
            });
        }
        if self.frame >= grid.frame_count() {
            return Err(MaskError::FrameOutOfRange {
                frame: self.frame,
                frames: grid.frame_count(),
            });
        }
        Ok(())
    }
}

/// Where a dropout draw happens; part of the key of its random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DrawSite {
    pub timestep: u32,
    pub layer: u32,
}

/// The dropout bias term: off-region pairs are allowed when their uniform
/// draw exceeds `beta_d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutParams {
    pub beta_d: f64,
    pub seed: u64,
    pub enabled: bool,
    pub site: DrawSite,
}

impl DropoutParams {
    pub fn new(beta_d: f64, seed: u64, enabled: bool) -> Result<Self, MaskError> {
        let params = DropoutParams {
            beta_d,
            seed,
            enabled,
            site: DrawSite::default(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn disabled() -> Self {
        DropoutParams {
            beta_d: 1.0,
            seed: 0,
            enabled: false,
            site: DrawSite::default(),
        }
    }

    pub fn at(mut self, timestep: u32, layer: u32) -> Self {
        self.site = DrawSite { timestep, layer };
        self
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        if !(0.0..=1.0).contains(&self.beta_d) {
            return Err(MaskError::InvalidBeta(self.beta_d));
        }
        Ok(())
    }
}

/// Which tokens an attention mask spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScope {
    /// The `N` tokens of one frame.
    Intra { frame: usize },
    /// All `B * N` tokens, frame-major.
    Cross { frames: usize },
}

impl MaskScope {
    fn stream_tag(&self) -> u64 {
        match *self {
            MaskScope::Intra { frame } => 1 + 2 * frame as u64,
            MaskScope::Cross { .. } => 0,
        }
    }
}

/// Dense square binary matrix gating self-attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    scope: MaskScope,
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    /// Wraps raw row-major bits; rejects non-square input and unset diagonals.
    pub fn from_bits(scope: MaskScope, size: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != size * size || size == 0 || (0..size).any(|i| !bits[i * size + i]) {
            return Err(MaskError::InvalidMask { size });
        }
        Ok(AttentionMask { scope, size, bits })
    }

    pub fn all_allowed(scope: MaskScope, size: usize) -> Self {
        AttentionMask {
            scope,
            size,
            bits: vec![true; size * size],
        }
    }

    pub fn identity(scope: MaskScope, size: usize) -> Self {
        let mut bits = vec![false; size * size];
        for i in 0..size {
            bits[i * size + i] = true;
        }
        AttentionMask { scope, size, bits }
    }

    /// Block-diagonal cross-scope mask made of per-frame intra masks.
    pub fn block_diagonal(blocks: &[AttentionMask]) -> Result<Self, MaskError> {
        let n = blocks.first().map_or(0, |b| b.size);
        if n == 0 || blocks.iter().any(|b| b.size != n) {
            return Err(MaskError::InvalidMask { size: n });
        }
        let size = n * blocks.len();
        let mut bits = vec![false; size * size];
        for (l, block) in blocks.iter().enumerate() {
            for i in 0..n {
                let row = (l * n + i) * size + l * n;
                bits[row..row + n].copy_from_slice(block.row(i));
            }
        }
        Ok(AttentionMask {
            scope: MaskScope::Cross {
                frames: blocks.len(),
            },
            size,
            bits,
        })
    }

    pub fn scope(&self) -> MaskScope {
        self.scope
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.size..(i + 1) * self.size]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn allowed_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// The `n x n` diagonal block for frame `l` of a cross mask.
    pub fn diagonal_block(&self, l: usize, n: usize) -> AttentionMask {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            let start = (l * n + i) * self.size + l * n;
            bits.extend_from_slice(&self.bits[start..start + n]);
        }
        AttentionMask {
            scope: MaskScope::Intra { frame: l },
            size: n,
            bits,
        }
    }

    /// Binary PGM (P5), 255 for allowed pairs.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.size, self.size)?;
        let pixels: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        out.write_all(&pixels)
    }

    /// One CSV row of 0/1 per mask row.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.size * self.size * 2);
        for i in 0..self.size {
            for (j, &b) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                s.push(if b { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

/// Tokens whose cell centres fall in `[lo, hi)` along one axis; when none
/// does, the single cell containing the interval midpoint.
fn covered_cells(lo: f64, hi: f64, cells: usize) -> std::ops::Range<usize> {
    let n = cells as f64;
    let centre = |i: usize| (i as f64 + 0.5) / n;
    let first = (0..cells).find(|&i| centre(i) >= lo).unwrap_or(cells);
    let end = (first..cells).find(|&i| centre(i) >= hi).unwrap_or(cells);
    if end > first {
        first..end
    } else {
        let mid = ((0.5 * (lo + hi) * n).floor() as usize).min(cells - 1);
        mid..mid + 1
    }
}

/// Rasterises a box by cell-centre containment. Boxes too small to contain a
/// centre along an axis snap to the cell holding their midpoint on that axis,
/// so the result always covers at least one token.
pub fn rasterize_box(
    bbox: &BoundingBox,
    grid: &TokenGrid,
    frame: usize,
    subject: SubjectId,
) -> SubjectMask {
    let rows = covered_cells(bbox.y0, bbox.y1, grid.height());
    let cols = covered_cells(bbox.x0, bbox.x1, grid.width());
    let mut bits = vec![false; grid.tokens()];
    for r in rows {
        for c in cols.clone() {
            bits[r * grid.width() + c] = true;
        }
    }
    SubjectMask {
        frame,
        subject,
        bits,
    }
}

/// Source cells feeding target cell `i` along one axis.
fn source_cells(i: usize, from: usize, to: usize) -> std::ops::Range<usize> {
    if to <= from {
        // every overlapped source cell
        let lo = i * from / to;
        let hi = ((i + 1) * from).div_ceil(to);
        lo..hi
    } else {
        // nearest source cell to the target centre
        let s = ((2 * i + 1) * from) / (2 * to);
        s..s + 1
    }
}

/// Nearest-neighbour resampling of a mask between two resolutions. When
/// shrinking, a cell is set if any source cell it overlaps is set, so
/// non-empty masks stay non-empty.
pub fn resample_mask(
    mask: &SubjectMask,
    from: &TokenGrid,
    to: &TokenGrid,
) -> Result<SubjectMask, MaskError> {
    if from.frame_count() != to.frame_count() {
        return Err(MaskError::FrameCountMismatch {
            from: from.frame_count(),
            to: to.frame_count(),
        });
    }
    mask.check_grid(from)?;
    let mut bits = vec![false; to.tokens()];
    for r in 0..to.height() {
        let src_rows = source_cells(r, from.height(), to.height());
        for c in 0..to.width() {
            let src_cols = source_cells(c, from.width(), to.width());
            bits[r * to.width() + c] = src_rows
                .clone()
                .any(|sr| src_cols.clone().any(|sc| mask.bits[sr * from.width() + sc]));
        }
    }
    Ok(SubjectMask {
        frame: mask.frame,
        subject: mask.subject.clone(),
        bits,
    })
}

/// Rasterises every layout of `plan` at `grid`, frame by frame.
pub fn plan_masks(plan: &StoryboardPlan, grid: &TokenGrid) -> Result<Vec<SubjectMask>, MaskError> {
    plan.validate()?;
    if plan.frame_count() != grid.frame_count() {
        return Err(MaskError::FrameOutOfRange {
            frame: plan.frame_count(),
            frames: grid.frame_count(),
        });
    }
    Ok(plan
        .frames
        .iter()
        .enumerate()
        .flat_map(|(l, frame)| {
            frame
                .layouts
                .iter()
                .map(move |layout| rasterize_box(&layout.bbox, grid, l, layout.subject_id.clone()))
        })
        .collect())
}

/// Allowed-pair matrix over `size` tokens: same-subject pairs, then dropout
/// survivors, then the diagonal.
fn assemble(
    scope: MaskScope,
    size: usize,
    groups: &BTreeMap<&SubjectId, Vec<usize>>,
    dropout: &DropoutParams,
) -> AttentionMask {
    let mut bits = vec![false; size * size];
    for tokens in groups.values() {
        for &i in tokens {
            let row = &mut bits[i * size..(i + 1) * size];
            for &j in tokens {
                row[j] = true;
            }
        }
    }
    if dropout.enabled {
        let mut draws = rng::stream(&[
            dropout.seed,
            u64::from(dropout.site.timestep),
            u64::from(dropout.site.layer),
            scope.stream_tag(),
        ]);
        // One draw per entry in row-major order, whether or not it is used,
        // so the stream position of (i, j) is fixed.
        for bit in bits.iter_mut() {
            let u: f64 = Open01.sample(&mut draws);
            if u > dropout.beta_d {
                *bit = true;
            }
        }
    }
    for i in 0..size {
        bits[i * size + i] = true;
    }
    AttentionMask { scope, size, bits }
}

/// Intra-frame mask `M_l` for the subjects of a single frame.
pub fn build_intra_mask(
    masks: &[SubjectMask],
    grid: &TokenGrid,
    dropout: &DropoutParams,
) -> Result<AttentionMask, MaskError> {
    dropout.validate()?;
    let frame = masks.first().map_or(0, |m| m.frame);
    let mut groups: BTreeMap<&SubjectId, Vec<usize>> = BTreeMap::new();
    for m in masks {
        m.check_grid(grid)?;
        if m.frame != frame {
            return Err(MaskError::MixedFrames {
                first: frame,
                other: m.frame,
            });
        }
        if groups.insert(&m.subject, m.tokens().collect()).is_some() {
            return Err(MaskError::DuplicateSubject {
                frame,
                subject: m.subject.clone(),
            });
        }
    }
    Ok(assemble(
        MaskScope::Intra { frame },
        grid.tokens(),
        &groups,
        dropout,
    ))
}

/// Cross-frame mask `M̄` over all `B * N` tokens. A subject's region in each
/// frame is concatenated frame-major; frames where it is absent contribute
/// nothing.
pub fn build_cross_mask(
    masks: &[SubjectMask],
    grid: &TokenGrid,
    dropout: &DropoutParams,
) -> Result<AttentionMask, MaskError> {
    dropout.validate()?;
    let n = grid.tokens();
    let mut groups: BTreeMap<&SubjectId, Vec<usize>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for m in masks {
        m.check_grid(grid)?;
        if !seen.insert((m.frame, &m.subject)) {
            return Err(MaskError::DuplicateSubject {
                frame: m.frame,
                subject: m.subject.clone(),
            });
        }
        groups
            .entry(&m.subject)
            .or_default()
            .extend(m.tokens().map(|i| m.frame * n + i));
    }
    Ok(assemble(
        MaskScope::Cross {
            frames: grid.frame_count(),
        },
        grid.total_tokens(),
        &groups,
        dropout,
    ))
}

/// Expected fraction of off-region pairs that survive dropout.
pub fn expected_offregion_density(beta_d: f64) -> f64 {
    1.0 - beta_d
}

/// Subject masks of one frame as a CSV grid (`.` empty, otherwise the index
/// of the first subject covering the cell). Handy for eyeballing layouts.
pub fn describe_frame(masks: &[SubjectMask], grid: &TokenGrid, frame: usize) -> String {
    let mut out = String::new();
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            let idx = r * grid.width() + c;
            let label = masks
                .iter()
                .filter(|m| m.frame == frame)
                .position(|m| m.bits[idx]);
            if c > 0 {
                out.push(',');
            }
            match label {
                Some(k) => write!(out, "{k}").unwrap(),
                None => out.push('.'),
            }
        }
        out.push('\n');
    }
    out
}
