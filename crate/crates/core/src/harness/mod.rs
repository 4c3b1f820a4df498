//! Desk-scale end-to-end pipeline.
//!
//! A seeded toy denoiser stands in for the diffusion backbone: a stack of
//! attention blocks whose self-attention can be unbounded, bounded per frame
//! or bounded jointly across frames, followed by cross-frame token merging, a
//! fixed feedforward mix and region-conditioned compositing. Runs record
//! per-step attention leakage and end-of-run consistency and pose-variance
//! proxies.

mod compare;
mod config;
mod denoiser;
mod metrics;
mod run;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::attention::AttentionError;
use crate::masks::MaskError;
use crate::plan::PlanError;
use crate::tokenmerge::MergeError;

pub use compare::{compare, sign_test_p_value, Ablation, Comparison, PairedRow};
pub use config::{
    Bounding, GridSpec, ModelSpec, RunConfig, Seeds, TimestepLadder, DEFAULT_BETA_D, DEFAULT_STEPS,
};
pub use denoiser::{
    baseline_step, toy_denoise_step, Conditioning, Mechanisms, RegionSampler, RegionalCompositor,
    StepOutput, ToyDenoiser, ToyDenoiserConfig,
};
pub use metrics::{centroid_spread, cross_frame_consistency, pose_variance};
pub use run::{
    emit_masks, emit_report, load_report, run_storyboard, simulate, DumpedMask, RunOutput,
    RunReport, StepLeakage, Summary,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    ReadInput {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    ParseInput { path: PathBuf, message: String },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("attention failed at step {step}, layer {layer}: {source}")]
    Attention {
        step: usize,
        layer: usize,
        #[source]
        source: AttentionError,
    },
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error("state became non-finite at step {step}, layer {layer}")]
    NonFinite { step: usize, layer: usize },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl HarnessError {
    /// True when the inputs (config, plan, masks) are at fault rather than
    /// the computation or the environment.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Config(_)
            | HarnessError::ReadInput { .. }
            | HarnessError::ParseInput { .. }
            | HarnessError::Mask(_)
            | HarnessError::Merge(_) => true,
            HarnessError::Plan(e) => e.is_validation(),
            HarnessError::Attention { .. }
            | HarnessError::NonFinite { .. }
            | HarnessError::Write { .. } => false,
        }
    }
}
