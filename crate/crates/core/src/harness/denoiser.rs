use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Bounding, HarnessError};
use crate::attention::{
    block_diagonal_weights, bounded_self_attention, cross_frame_bounded_attention, frame,
    leakage_fraction, AttentionError, ProjectionSet,
};
use crate::masks::{
    build_cross_mask, build_intra_mask, AttentionMask, DropoutParams, MaskScope, SubjectMask,
    TokenGrid,
};
use crate::plan::{StoryboardPlan, SubjectId};
use crate::rng;
use crate::tokenmerge::{
    build_merge_gate, match_tokens, match_tokens_same_subject, merge_tokens, MergeSchedule,
};

const RMS_EPS: f64 = 1e-12;

/// Attention residual gain.
const ATTN_GAIN: f64 = 0.5;
const FF_GAIN: f64 = 0.02;
/// Block updates keep full strength down to this timestep, then fall off
/// as `(t / KNEE)^UPDATE_POWER`, so structure set early in the ladder
/// survives the late steps.
const KNEE: f64 = 750.0;
const UPDATE_POWER: i32 = 8;
const CONDITIONING_POWER: i32 = 2;
const REGION_GAIN: f64 = 0.02;
const GLOBAL_GAIN: f64 = 0.02;
/// Weight of the local-prompt vector against the subject identity vector.
const PROMPT_WEIGHT: f64 = 0.6;
/// Gain of the subject's shared spatial pattern relative to `REGION_GAIN`.
const LAYOUT_GAIN: f64 = 30.0;
/// Query scale; sharper attention keeps tokens close to themselves.
const QUERY_SHARPNESS: f64 = 3.0;
/// Off-identity spread of the query/key weights.
const QK_SPREAD: f64 = 0.1;
/// Off-identity spread of the value weights.
const VALUE_SPREAD: f64 = 0.1;
/// Positional embeddings dominate content when matching tokens, so merges
/// pair spatially aligned tokens.
const POSITION_WEIGHT: f64 = 5.0;
const POSITION_BANDWIDTH: f64 = 12.0;

const TAG_FF: u64 = 0x6666;
const TAG_POSITION: u64 = 0x0070_6f73;
const TAG_QUERY: u64 = 0x71;
const TAG_KEY: u64 = 0x6b;
const TAG_POSE: u64 = 0x706f_7365;
const TAG_LAYOUT: u64 = 0x6c61_796f;
const TAG_IDENTITY: u64 = 0x6964;
const TAG_PROMPT: u64 = 0x7072;
const TAG_GLOBAL: u64 = 0x676c;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiserConfig {
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub grid: TokenGrid,
    pub weight_seed: u64,
}

#[derive(Debug, Clone)]
struct Block {
    proj: ProjectionSet,
    ff: Array2<f64>,
    /// The positional part of the value stream, removed from the attention
    /// output so positions steer attention without entering the state.
    value_position: Array2<f64>,
}

/// A stack of attention blocks with seeded, near-identity weights. Each block
/// normalises its input, adds a positional embedding for the queries and
/// keys, attends, adds the time-scaled result back and applies a `tanh`
/// feedforward mix. Attention is mostly similarity-driven, so a token's
/// strongest cross-frame partner is usually the token at the same place.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    blocks: Vec<Block>,
    position: Array2<f64>,
}

impl ToyDenoiser {
    pub fn new(config: ToyDenoiserConfig) -> Result<Self, HarnessError> {
        if config.layers == 0 || config.channels == 0 || config.heads == 0 {
            return Err(HarnessError::Config(format!(
                "denoiser needs positive layers, channels and heads: {config:?}"
            )));
        }
        let c = config.channels;
        let blocks = (0..config.layers)
            .map(|layer| {
                let seed = rng::derive_key(&[config.weight_seed, layer as u64]);
                let seeded = ProjectionSet::seeded(c, config.heads, seed)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                let eye = Array2::<f64>::eye(c);
                let spread = QK_SPREAD / (c as f64).sqrt();
                let w_q = (&eye + &gaussian(&[seed, TAG_QUERY], (c, c), spread)) * QUERY_SHARPNESS;
                let w_k = &eye + &gaussian(&[seed, TAG_KEY], (c, c), spread);
                let w_v = &eye + &(seeded.w_v() * VALUE_SPREAD);
                let proj = ProjectionSet::new(w_q, w_k, w_v, None, config.heads)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                let ff = gaussian(&[seed, TAG_FF], (c, c), 1.0 / (c as f64).sqrt());
                Ok((proj, ff))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let position = positional_embedding(&config.grid, c, config.weight_seed) * POSITION_WEIGHT;
        let blocks = blocks
            .into_iter()
            .map(|(proj, ff)| Block {
                value_position: position.dot(proj.w_v()),
                proj,
                ff,
            })
            .collect();
        Ok(ToyDenoiser {
            config,
            blocks,
            position,
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Seeded standard-normal initial latents, `B x N x C`.
    pub fn initial_latents(&self, noise_seed: u64) -> Array3<f64> {
        let g = &self.config.grid;
        let mut draws = rng::stream(&[noise_seed, 0x6c61_7465]);
        Array3::from_shape_simple_fn((g.frame_count(), g.tokens(), self.config.channels), || {
            draws.sample(StandardNormal)
        })
    }

    fn check_state(&self, z: &ArrayView3<'_, f64>) -> Result<(), HarnessError> {
        let g = &self.config.grid;
        let want = (g.frame_count(), g.tokens(), self.config.channels);
        if z.dim() != want {
            return Err(HarnessError::Config(format!(
                "state has shape {:?}, denoiser expects {want:?}",
                z.dim()
            )));
        }
        Ok(())
    }
}

fn gaussian(key: &[u64], shape: (usize, usize), scale: f64) -> Array2<f64> {
    let mut draws = rng::stream(key);
    Array2::from_shape_simple_fn(shape, || scale * draws.sample::<f64, _>(StandardNormal))
}

fn unit_vector(key: &[u64], channels: usize) -> Array1<f64> {
    let mut draws = rng::stream(key);
    let v = Array1::from_shape_simple_fn(channels, || draws.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Random Fourier features of the token centres: nearby tokens get similar
/// embeddings.
fn positional_embedding(grid: &TokenGrid, channels: usize, seed: u64) -> Array2<f64> {
    let mut draws = rng::stream(&[seed, TAG_POSITION]);
    let freqs: Vec<(f64, f64, f64)> = (0..channels)
        .map(|_| {
            let wx: f64 = draws.sample(StandardNormal);
            let wy: f64 = draws.sample(StandardNormal);
            let phase = draws.random::<f64>() * std::f64::consts::TAU;
            (POSITION_BANDWIDTH * wx, POSITION_BANDWIDTH * wy, phase)
        })
        .collect();
    let amp = (2.0f64).sqrt();
    Array2::from_shape_fn((grid.tokens(), channels), |(t, c)| {
        let (x, y) = grid.center(t);
        let (wx, wy, ph) = freqs[c];
        amp * (wx * x + wy * y + ph).cos()
    })
}

fn text_key(text: &str) -> u64 {
    rng::fnv1a(text.as_bytes())
}

/// Per-token RMS normalisation over channels.
fn rms_normalize(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let rms = (row.dot(&row) / row.len() as f64 + RMS_EPS).sqrt();
        row /= rms;
    }
    out
}

/// Scales each frame to unit RMS.
fn normalize_frames(z: &mut Array3<f64>) {
    for mut f in z.axis_iter_mut(Axis(0)) {
        let rms = (f.iter().map(|x| x * x).sum::<f64>() / f.len() as f64 + RMS_EPS).sqrt();
        f /= rms;
    }
}

struct Region {
    frame: usize,
    tokens: Vec<usize>,
    /// One bias vector per layer.
    bias: Vec<Array1<f64>>,
    pattern: Vec<f64>,
    pose_dir: Vec<Array1<f64>>,
}

/// A smooth zero-mean pattern over box-relative coordinates, keyed by the
/// subject so every frame gets the same one.
fn subject_layout(tokens: &[usize], grid: &TokenGrid, id: u64) -> Vec<f64> {
    let mut draws = rng::stream(&[id, TAG_LAYOUT]);
    let (fx, fy): (f64, f64) = (draws.sample(StandardNormal), draws.sample(StandardNormal));
    let phase = draws.random::<f64>() * std::f64::consts::TAU;
    let f = std::f64::consts::TAU;
    let centres: Vec<(f64, f64)> = tokens.iter().map(|&t| grid.center(t)).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &centres {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let rel = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let raw: Vec<f64> = centres
        .iter()
        .map(|&(x, y)| (f * (fx * rel(x, x0, x1) + fy * rel(y, y0, y1)) + phase).cos())
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter().map(|v| v - mean).collect()
}

/// Prompt-derived bias vectors. A subject's bias mixes a vector keyed by its
/// id (shared across frames) with one keyed by its local prompt (varies per
/// frame); every frame also carries a bias keyed by its global prompt.
pub struct Conditioning {
    regions: Vec<Region>,
    global: Vec<Vec<Array1<f64>>>,
}

impl Conditioning {
    pub fn from_plan(
        plan: &StoryboardPlan,
        masks: &[SubjectMask],
        grid: &TokenGrid,
        layers: usize,
        channels: usize,
    ) -> Result<Self, HarnessError> {
        let mut regions = Vec::with_capacity(masks.len());
        for m in masks {
            let layout = plan
                .frames
                .get(m.frame())
                .and_then(|f| f.layouts.iter().find(|l| &l.subject_id == m.subject()))
                .ok_or_else(|| {
                    HarnessError::Config(format!(
                        "mask for `{}` in frame {} has no layout in the plan",
                        m.subject(),
                        m.frame() + 1
                    ))
                })?;
            let id = text_key(m.subject().as_str());
            let prompt = text_key(&layout.local_prompt);
            let bias = (0..layers as u64)
                .map(|layer| {
                    let v = unit_vector(&[id, layer, TAG_IDENTITY], channels)
                        + PROMPT_WEIGHT * unit_vector(&[prompt, layer, TAG_PROMPT], channels);
                    let norm = v.dot(&v).sqrt();
                    v / norm
                })
                .collect();
            let tokens: Vec<usize> = m.tokens().collect();
            let pattern = subject_layout(&tokens, grid, id);
            let pose_dir = (0..layers as u64)
                .map(|layer| unit_vector(&[id, layer, TAG_POSE], channels))
                .collect();
            regions.push(Region {
                frame: m.frame(),
                tokens,
                bias,
                pattern,
                pose_dir,
            });
        }
        let global = plan
            .frames
            .iter()
            .map(|f| {
                let key = text_key(&f.global_prompt);
                (0..layers as u64)
                    .map(|layer| unit_vector(&[key, layer, TAG_GLOBAL], channels))
                    .collect()
            })
            .collect();
        Ok(Conditioning { regions, global })
    }
}

/// Region-conditioned update applied after each block.
pub trait RegionSampler: Send + Sync {
    fn apply(&self, state: &mut Array3<f64>, layer: usize, t: u32);
}

/// Adds each subject's bias to the tokens under its mask and the frame's
/// global bias to every token. The subject bias carries a spatial pattern in
/// box-relative coordinates shared by every frame, which pulls all frames
/// toward one layout the way a shared prompt favours one pose.
pub struct RegionalCompositor {
    conditioning: Conditioning,
    region_gain: f64,
    global_gain: f64,
}

impl RegionalCompositor {
    pub fn new(conditioning: Conditioning) -> Self {
        RegionalCompositor {
            conditioning,
            region_gain: REGION_GAIN,
            global_gain: GLOBAL_GAIN,
        }
    }

    pub fn with_gains(mut self, region: f64, global: f64) -> Self {
        self.region_gain = region;
        self.global_gain = global;
        self
    }
}

impl RegionSampler for RegionalCompositor {
    fn apply(&self, state: &mut Array3<f64>, layer: usize, t: u32) {
        let sc = time_gain(t, CONDITIONING_POWER);
        let region_gain = self.region_gain * sc;
        let global_gain = self.global_gain * sc;
        for (l, biases) in self.conditioning.global.iter().enumerate() {
            let g = &biases[layer] * global_gain;
            for mut token in state.index_axis_mut(Axis(0), l).rows_mut() {
                token += &g;
            }
        }
        for r in &self.conditioning.regions {
            let b = &r.bias[layer] * region_gain;
            let mut f = state.index_axis_mut(Axis(0), r.frame);
            let pd = &r.pose_dir[layer] * (region_gain * LAYOUT_GAIN);
            for (&t, &w) in r.tokens.iter().zip(&r.pattern) {
                let mut token = f.row_mut(t);
                token += &b;
                token.scaled_add(w, &pd);
            }
        }
    }
}

/// Which of the consistency mechanisms are active in a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanisms {
    pub bounding: Bounding,
    pub dropout: DropoutParams,
    pub merging: bool,
    pub schedule: MergeSchedule,
    pub same_subject_only: bool,
    /// Keep each layer's `BN x BN` mask in the step output.
    pub record_masks: bool,
}

impl Mechanisms {
    /// Everything off: unbounded joint attention, no merging.
    pub fn none() -> Self {
        Mechanisms {
            bounding: Bounding::Off,
            dropout: DropoutParams::disabled(),
            merging: false,
            schedule: MergeSchedule::empty(),
            same_subject_only: false,
            record_masks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: Array3<f64>,
    /// Per-subject leakage averaged over layers.
    pub leakage: BTreeMap<SubjectId, f64>,
    /// Per-layer masks, empty unless requested.
    pub masks: Vec<AttentionMask>,
}

/// One denoising step: every block attends under the configured bounding,
/// merges the attention output across frames at the scheduled strength,
/// then the sampler injects the region conditioning. The state is
/// renormalised per frame at the end.
#[allow(clippy::too_many_arguments)]
pub fn toy_denoise_step(
    model: &ToyDenoiser,
    z: ArrayView3<'_, f64>,
    t: u32,
    step: usize,
    masks: &[SubjectMask],
    mechanisms: &Mechanisms,
    sampler: &dyn RegionSampler,
) -> Result<StepOutput, HarnessError> {
    model.check_state(&z)?;
    let grid = &model.config.grid;
    let (b, n, c) = z.dim();
    let alpha = if mechanisms.merging {
        mechanisms.schedule.alpha_at(t)
    } else {
        0.0
    };
    let mut state = z.to_owned();
    let mut leakage: BTreeMap<SubjectId, f64> = BTreeMap::new();
    let mut recorded = Vec::new();

    for (layer, block) in model.blocks.iter().enumerate() {
        let wrap = |source: AttentionError| HarnessError::Attention {
            step,
            layer,
            source,
        };
        let dropout = mechanisms.dropout.at(t, layer as u32);
        let flat = state
            .view()
            .into_shape_with_order((b * n, c))
            .expect("contiguous");
        let mut h = rms_normalize(&flat.to_owned())
            .into_shape_with_order((b, n, c))
            .expect("contiguous");
        for mut f in h.axis_iter_mut(Axis(0)) {
            f += &model.position;
        }

        let (mut out, weights, mask) = match mechanisms.bounding {
            Bounding::Off => {
                let mask = AttentionMask::all_allowed(MaskScope::Cross { frames: b }, b * n);
                let r =
                    cross_frame_bounded_attention(h.view(), &block.proj, &mask).map_err(wrap)?;
                (r.output, r.weights, mask)
            }
            Bounding::Cross => {
                let mask = build_cross_mask(masks, grid, &dropout)?;
                let r =
                    cross_frame_bounded_attention(h.view(), &block.proj, &mask).map_err(wrap)?;
                (r.output, r.weights, mask)
            }
            Bounding::Intra => {
                let mut outputs = Array3::zeros((b, n, c));
                let mut blocks = Vec::with_capacity(b);
                let mut frame_masks = Vec::with_capacity(b);
                for l in 0..b {
                    let own: Vec<SubjectMask> =
                        masks.iter().filter(|m| m.frame() == l).cloned().collect();
                    let mask = if own.is_empty() {
                        AttentionMask::identity(MaskScope::Intra { frame: l }, n)
                    } else {
                        build_intra_mask(&own, grid, &dropout)?
                    };
                    let r = bounded_self_attention(frame(h.view(), l), &block.proj, &mask)
                        .map_err(wrap)?;
                    outputs
                        .index_axis_mut(Axis(0), l)
                        .assign(&r.output.index_axis(Axis(0), 0));
                    blocks.push(r.weights);
                    frame_masks.push(mask);
                }
                let mask = AttentionMask::block_diagonal(&frame_masks)?;
                (outputs, block_diagonal_weights(&blocks), mask)
            }
        };

        if !masks.is_empty() {
            for (id, v) in leakage_fraction(weights.view(), masks, grid).map_err(wrap)? {
                *leakage.entry(id).or_insert(0.0) += v;
            }
        }

        if alpha != 0.0 && mechanisms.bounding != Bounding::Intra {
            let gate = build_merge_gate(weights.view(), b, n)?;
            let matches = if mechanisms.same_subject_only {
                match_tokens_same_subject(&gate, masks, grid)?
            } else {
                match_tokens(&gate)
            };
            out = merge_tokens(out.view(), &matches, alpha)?;
        }

        for mut f in out.axis_iter_mut(Axis(0)) {
            f -= &block.value_position;
        }
        state = finish_block(state, &out, block, sampler, layer, t);
        if state.iter().any(|x| !x.is_finite()) {
            return Err(HarnessError::NonFinite { step, layer });
        }
        if mechanisms.record_masks {
            recorded.push(mask);
        }
    }
    normalize_frames(&mut state);

    let layers = model.blocks.len() as f64;
    for v in leakage.values_mut() {
        *v = (*v / layers).clamp(0.0, 1.0);
    }
    Ok(StepOutput {
        state,
        leakage,
        masks: recorded,
    })
}

fn time_gain(t: u32, power: i32) -> f64 {
    (t as f64 / KNEE).min(1.0).powi(power)
}

/// Residual add, feedforward mix and conditioning, shared by both step
/// paths.
fn finish_block(
    mut state: Array3<f64>,
    attended: &Array3<f64>,
    block: &Block,
    sampler: &dyn RegionSampler,
    layer: usize,
    t: u32,
) -> Array3<f64> {
    let (b, n, c) = state.dim();
    let sc = time_gain(t, UPDATE_POWER);
    state.scaled_add(sc * ATTN_GAIN, attended);
    let flat = state
        .view()
        .into_shape_with_order((b * n, c))
        .expect("contiguous");
    let mixed = rms_normalize(&flat.to_owned())
        .dot(&block.ff)
        .mapv(f64::tanh)
        * (FF_GAIN * sc);
    state += &mixed.into_shape_with_order((b, n, c)).expect("contiguous");
    sampler.apply(&mut state, layer, t);
    state
}

/// Plain multi-head softmax attention over all `BN` tokens, written out
/// without masks.
fn plain_attention(x: ArrayView2<'_, f64>, proj: &ProjectionSet) -> Array2<f64> {
    let tokens = x.nrows();
    let q = x.dot(proj.w_q());
    let k = x.dot(proj.w_k());
    let v = x.dot(proj.w_v());
    let dk = proj.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Array2::zeros((tokens, proj.model_dim()));
    for h in 0..proj.heads() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for mut row in a.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            row.mapv_inplace(|e| e / sum);
        }
        out.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
    }
    match proj.w_o() {
        Some(w_o) => out.dot(w_o),
        None => out,
    }
}

/// The toy transformer step with every consistency mechanism removed.
pub fn baseline_step(
    model: &ToyDenoiser,
    z: ArrayView3<'_, f64>,
    t: u32,
    sampler: &dyn RegionSampler,
) -> Result<Array3<f64>, HarnessError> {
    model.check_state(&z)?;
    let (b, n, c) = z.dim();
    let mut state = z.to_owned();
    for (layer, block) in model.blocks.iter().enumerate() {
        let flat = state
            .view()
            .into_shape_with_order((b * n, c))
            .expect("contiguous");
        let mut h = rms_normalize(&flat.to_owned())
            .into_shape_with_order((b, n, c))
            .expect("contiguous");
        for mut f in h.axis_iter_mut(Axis(0)) {
            f += &model.position;
        }
        let h = h.into_shape_with_order((b * n, c)).expect("contiguous");
        let mut out = plain_attention(h.view(), &block.proj)
            .into_shape_with_order((b, n, c))
            .expect("contiguous");
        for mut f in out.axis_iter_mut(Axis(0)) {
            f -= &block.value_position;
        }
        state = finish_block(state, &out, block, sampler, layer, t);
        if state.iter().any(|x| !x.is_finite()) {
            return Err(HarnessError::NonFinite { step: 0, layer });
        }
    }
    normalize_frames(&mut state);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::plan_masks;
    use crate::plan::{mock_plan, StoryPrompt};

    fn setup(
        frames: usize,
        subjects: usize,
    ) -> (ToyDenoiser, Vec<SubjectMask>, RegionalCompositor) {
        let plan = mock_plan(&StoryPrompt::new("a walk", frames).unwrap(), subjects, 3).unwrap();
        let grid = TokenGrid::new(4, 4, frames).unwrap();
        let masks = plan_masks(&plan, &grid).unwrap();
        let model = ToyDenoiser::new(ToyDenoiserConfig {
            layers: 2,
            channels: 8,
            heads: 2,
            grid,
            weight_seed: 11,
        })
        .unwrap();
        let sampler =
            RegionalCompositor::new(Conditioning::from_plan(&plan, &masks, &grid, 2, 8).unwrap());
        (model, masks, sampler)
    }

    #[test]
    fn no_mechanisms_reproduce_baseline_bit_for_bit() {
        let (model, masks, sampler) = setup(3, 2);
        let z = model.initial_latents(5);
        for t in [1000, 800, 300] {
            let step = toy_denoise_step(
                &model,
                z.view(),
                t,
                0,
                &masks,
                &Mechanisms::none(),
                &sampler,
            )
            .unwrap();
            let base = baseline_step(&model, z.view(), t, &sampler).unwrap();
            assert_eq!(step.state, base);
        }
    }

    #[test]
    fn strict_bounding_has_zero_leakage() {
        let (model, masks, sampler) = setup(3, 2);
        let z = model.initial_latents(9);
        for bounding in [Bounding::Cross, Bounding::Intra] {
            let mech = Mechanisms {
                bounding,
                dropout: DropoutParams::new(1.0, 4, true).unwrap(),
                merging: true,
                schedule: MergeSchedule::standard(),
                same_subject_only: false,
                record_masks: false,
            };
            let out = toy_denoise_step(&model, z.view(), 900, 0, &masks, &mech, &sampler).unwrap();
            assert_eq!(out.leakage.len(), 2);
            assert!(
                out.leakage.values().all(|&v| v == 0.0),
                "{bounding:?}: {:?}",
                out.leakage
            );
        }
    }

    #[test]
    fn unbounded_attention_leaks() {
        let (model, masks, sampler) = setup(2, 2);
        let z = model.initial_latents(1);
        let out = toy_denoise_step(
            &model,
            z.view(),
            500,
            0,
            &masks,
            &Mechanisms::none(),
            &sampler,
        )
        .unwrap();
        assert!(out.leakage.values().all(|&v| v > 0.1 && v < 1.0));
    }

    #[test]
    fn steps_are_deterministic_and_record_masks() {
        let (model, masks, sampler) = setup(2, 2);
        let z = model.initial_latents(2);
        let mech = Mechanisms {
            bounding: Bounding::Cross,
            dropout: DropoutParams::new(0.9, 8, true).unwrap(),
            merging: true,
            schedule: MergeSchedule::standard(),
            same_subject_only: false,
            record_masks: true,
        };
        let a = toy_denoise_step(&model, z.view(), 950, 1, &masks, &mech, &sampler).unwrap();
        let b = toy_denoise_step(&model, z.view(), 950, 1, &masks, &mech, &sampler).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masks.len(), 2);
        assert!(a.masks.iter().all(|m| m.size() == 32));
        // dropout is drawn per layer
        assert_ne!(a.masks[0], a.masks[1]);
    }

    #[test]
    fn intra_masks_are_block_diagonal() {
        let (model, masks, sampler) = setup(2, 2);
        let z = model.initial_latents(2);
        let mech = Mechanisms {
            bounding: Bounding::Intra,
            record_masks: true,
            ..Mechanisms::none()
        };
        let out = toy_denoise_step(&model, z.view(), 700, 0, &masks, &mech, &sampler).unwrap();
        let m = &out.masks[0];
        assert!((0..16).all(|i| (16..32).all(|j| !m.get(i, j) && !m.get(j, i))));
    }

    #[test]
    fn rejects_wrong_state_shape() {
        let (model, masks, sampler) = setup(2, 2);
        let z = Array3::zeros((3, 16, 8));
        assert!(matches!(
            toy_denoise_step(
                &model,
                z.view(),
                1,
                0,
                &masks,
                &Mechanisms::none(),
                &sampler
            ),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn non_finite_state_is_located() {
        let (model, masks, sampler) = setup(2, 2);
        let mut z = model.initial_latents(2);
        z[[1, 3, 0]] = f64::NAN;
        let err = toy_denoise_step(
            &model,
            z.view(),
            1,
            4,
            &masks,
            &Mechanisms::none(),
            &sampler,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                HarnessError::Attention {
                    step: 4,
                    layer: 0,
                    ..
                }
            ),
            "{err:?}"
        );
    }
}
