//! Seeded random inputs shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use storyboard_core::attention::ProjectionSet;
use storyboard_core::masks::{rasterize_box, SubjectMask, TokenGrid};
use storyboard_core::plan::{BoundingBox, SubjectId};
use storyboard_core::rng;

pub fn stream(seed: u64) -> ChaCha8Rng {
    rng::stream(&[seed, 0x7465_7374])
}

pub fn gaussian(r: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * r.sample::<f64, _>(StandardNormal))
}

pub fn features(r: &mut ChaCha8Rng, b: usize, n: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((b, n, c), || r.sample(StandardNormal))
}

pub fn random_box(r: &mut ChaCha8Rng) -> BoundingBox {
    let mut axis = || {
        let a: f64 = r.random_range(0.0..0.9);
        let b: f64 = r.random_range(a + 0.05..=1.0);
        (a, b)
    };
    let (x0, x1) = axis();
    let (y0, y1) = axis();
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

/// Random grid with `h * w <= max_tokens`.
pub fn random_grid(r: &mut ChaCha8Rng, frames: usize, max_tokens: usize) -> TokenGrid {
    let h = r.random_range(1..=max_tokens.min(6));
    let w = r.random_range(1..=(max_tokens / h).min(8));
    TokenGrid::new(h, w, frames).unwrap()
}

/// Up to `max_subjects` subjects with random boxes. Every frame gets at
/// least one subject; the others appear with probability 3/4.
pub fn random_masks(r: &mut ChaCha8Rng, grid: &TokenGrid, max_subjects: usize) -> Vec<SubjectMask> {
    let k = r.random_range(1..=max_subjects);
    let mut out = Vec::new();
    for frame in 0..grid.frame_count() {
        for s in 0..k {
            if s == 0 || r.random_bool(0.75) {
                let id = SubjectId::new(format!("s{s}"));
                out.push(rasterize_box(&random_box(r), grid, frame, id));
            }
        }
    }
    out
}

/// Random projections, with an output projection back to `channels` when
/// `with_output` is set.
pub fn random_projection(
    r: &mut ChaCha8Rng,
    channels: usize,
    heads: usize,
    head_dim: usize,
    with_output: bool,
) -> ProjectionSet {
    let d = heads * head_dim;
    let scale = 1.0 / (channels as f64).sqrt();
    let (w_q, w_k, w_v) = (
        gaussian(r, (channels, d), scale),
        gaussian(r, (channels, d), scale),
        gaussian(r, (channels, d), scale),
    );
    let w_o = with_output.then(|| gaussian(r, (d, channels), 1.0 / (d as f64).sqrt()));
    ProjectionSet::new(w_q, w_k, w_v, w_o, heads).unwrap()
}
