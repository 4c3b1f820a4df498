use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView3, Axis};

use crate::masks::{SubjectMask, TokenGrid};
use crate::plan::SubjectId;

fn by_subject(masks: &[SubjectMask]) -> BTreeMap<&SubjectId, Vec<&SubjectMask>> {
    let mut out: BTreeMap<&SubjectId, Vec<&SubjectMask>> = BTreeMap::new();
    for m in masks {
        out.entry(m.subject()).or_default().push(m);
    }
    out
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let denom = (a.dot(a) * b.dot(b)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(b) / denom).clamp(-1.0, 1.0)
}

/// Mean cosine similarity of a subject's mean region feature across every
/// pair of frames it appears in. Subjects seen in fewer than two frames are
/// omitted.
pub fn cross_frame_consistency(
    state: ArrayView3<'_, f64>,
    masks: &[SubjectMask],
) -> BTreeMap<SubjectId, f64> {
    let mut out = BTreeMap::new();
    for (id, ms) in by_subject(masks) {
        if ms.len() < 2 {
            continue;
        }
        let means: Vec<Array1<f64>> = ms
            .iter()
            .map(|m| {
                let f = state.index_axis(Axis(0), m.frame());
                let mut acc = Array1::zeros(f.ncols());
                for t in m.tokens() {
                    acc += &f.row(t);
                }
                acc / m.count() as f64
            })
            .collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                total += cosine(&means[i], &means[j]);
                pairs += 1;
            }
        }
        out.insert(id.clone(), (total / pairs as f64).clamp(-1.0, 1.0));
    }
    out
}

/// Mean pairwise distance, across frames, of the centroid of a subject's
/// feature mass (squared token norm) over its region, in normalised image
/// coordinates. Subjects seen in fewer than two frames are omitted.
pub fn centroid_spread(
    state: ArrayView3<'_, f64>,
    masks: &[SubjectMask],
    grid: &TokenGrid,
) -> BTreeMap<SubjectId, f64> {
    let mut out = BTreeMap::new();
    for (id, ms) in by_subject(masks) {
        if ms.len() < 2 {
            continue;
        }
        let centroids: Vec<(f64, f64)> = ms
            .iter()
            .map(|m| {
                let f = state.index_axis(Axis(0), m.frame());
                let (mut sx, mut sy, mut mass) = (0.0, 0.0, 0.0);
                for t in m.tokens() {
                    let row = f.row(t);
                    let w = row.dot(&row);
                    let (x, y) = grid.center(t);
                    sx += w * x;
                    sy += w * y;
                    mass += w;
                }
                if mass == 0.0 {
                    let n = m.count() as f64;
                    m.tokens().fold((0.0, 0.0), |(ax, ay), t| {
                        let (x, y) = grid.center(t);
                        (ax + x / n, ay + y / n)
                    })
                } else {
                    (sx / mass, sy / mass)
                }
            })
            .collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                let (dx, dy) = (
                    centroids[i].0 - centroids[j].0,
                    centroids[i].1 - centroids[j].1,
                );
                total += (dx * dx + dy * dy).sqrt();
                pairs += 1;
            }
        }
        out.insert(id.clone(), total / pairs as f64);
    }
    out
}

/// Side of the canonical grid a subject region is resampled onto before
/// layouts are compared.
pub const LAYOUT_CELLS: usize = 4;

/// A region's spatial feature layout: tokens binned into a
/// `LAYOUT_CELLS x LAYOUT_CELLS` grid spanning the region's extent, each cell
/// averaged, then the region mean subtracted. Empty cells stay at zero.
fn region_layout(state: ArrayView3<'_, f64>, mask: &SubjectMask, grid: &TokenGrid) -> Array1<f64> {
    let f = state.index_axis(Axis(0), mask.frame());
    let c = f.ncols();
    let centres: Vec<(usize, (f64, f64))> = mask.tokens().map(|t| (t, grid.center(t))).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(_, (x, y)) in &centres {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let cell = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            (((v - lo) / (hi - lo) * LAYOUT_CELLS as f64) as usize).min(LAYOUT_CELLS - 1)
        } else {
            0
        }
    };
    let k = LAYOUT_CELLS * LAYOUT_CELLS;
    let mut sums = Array2::<f64>::zeros((k, c));
    let mut counts = vec![0usize; k];
    let mut mean = Array1::<f64>::zeros(c);
    for &(t, (x, y)) in &centres {
        let i = cell(y, y0, y1) * LAYOUT_CELLS + cell(x, x0, x1);
        let mut row = sums.row_mut(i);
        row += &f.row(t);
        counts[i] += 1;
        mean += &f.row(t);
    }
    mean /= centres.len().max(1) as f64;
    for (i, mut row) in sums.rows_mut().into_iter().enumerate() {
        if counts[i] == 0 {
            row.fill(0.0);
        } else {
            row /= counts[i] as f64;
            row -= &mean;
        }
    }
    sums.into_shape_with_order(k * c).expect("contiguous")
}

/// Pose-variance proxy: mean over frame pairs of `(1 - cos) / 2` between a
/// subject's mean-removed region layouts, so 0 means the same arrangement
/// and 1 the opposite one. Appearance (the region mean) is left to
/// [`cross_frame_consistency`]. Subjects seen in fewer than two frames are
/// omitted.
pub fn pose_variance(
    state: ArrayView3<'_, f64>,
    masks: &[SubjectMask],
    grid: &TokenGrid,
) -> BTreeMap<SubjectId, f64> {
    let mut out = BTreeMap::new();
    for (id, ms) in by_subject(masks) {
        if ms.len() < 2 {
            continue;
        }
        let layouts: Vec<Array1<f64>> = ms.iter().map(|m| region_layout(state, m, grid)).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..layouts.len() {
            for j in i + 1..layouts.len() {
                let flat_i = layouts[i].iter().all(|v| *v == 0.0);
                let flat_j = layouts[j].iter().all(|v| *v == 0.0);
                // two featureless layouts agree; one flat against a structured one is unrelated
                let cos = match (flat_i, flat_j) {
                    (true, true) => 1.0,
                    (true, false) | (false, true) => 0.0,
                    _ => cosine(&layouts[i], &layouts[j]),
                };
                total += (1.0 - cos) / 2.0;
                pairs += 1;
            }
        }
        out.insert(id.clone(), total / pairs as f64);
    }
    out
}
