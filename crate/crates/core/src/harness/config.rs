use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::masks::{DropoutParams, TokenGrid};
use crate::plan::{parse_plan, StoryboardPlan};
use crate::tokenmerge::MergeSchedule;

pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_BETA_D: f64 = 0.9;
const MAX_TIMESTEP: u32 = 1000;

/// Which attention pattern the toy denoiser uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bounding {
    /// Joint attention over every token of every frame, no mask.
    Off,
    /// Each frame attends only within itself, bounded by subject regions.
    Intra,
    /// Joint attention across frames, bounded by subject regions.
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { h: 8, w: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub noise: u64,
    #[serde(default)]
    pub dropout: u64,
    #[serde(default)]
    pub weights: u64,
}

impl Seeds {
    pub fn offset(&self, by: u64) -> Seeds {
        Seeds {
            noise: self.noise.wrapping_add(by),
            dropout: self.dropout.wrapping_add(by),
            weights: self.weights.wrapping_add(by),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            layers: 2,
            channels: 16,
            heads: 2,
        }
    }
}

/// Either a step count (uniform ladder from 1000 towards 0) or explicit
/// timesteps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimestepLadder {
    Count(usize),
    Explicit(Vec<u32>),
}

impl Default for TimestepLadder {
    fn default() -> Self {
        TimestepLadder::Count(DEFAULT_STEPS)
    }
}

impl TimestepLadder {
    /// Strictly descending timesteps, one per denoising step.
    pub fn timesteps(&self) -> Result<Vec<u32>, HarnessError> {
        let ts = match self {
            TimestepLadder::Count(0) => {
                return Err(HarnessError::Config("steps must be at least 1".into()))
            }
            TimestepLadder::Count(s) => {
                let s = *s as u64;
                (0..s)
                    .map(|i| (u64::from(MAX_TIMESTEP) * (s - i) / s) as u32)
                    .collect::<Vec<_>>()
            }
            TimestepLadder::Explicit(ts) => ts.clone(),
        };
        if ts.is_empty() {
            return Err(HarnessError::Config("timestep ladder is empty".into()));
        }
        if ts.windows(2).any(|w| w[0] <= w[1]) {
            return Err(HarnessError::Config(format!(
                "timestep ladder must be strictly descending, got {ts:?}"
            )));
        }
        Ok(ts)
    }
}

fn default_beta_d() -> f64 {
    DEFAULT_BETA_D
}

fn default_true() -> bool {
    true
}

fn default_bounding() -> Bounding {
    Bounding::Cross
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Run configuration as read from JSON. Exactly one of `plan_path` and
/// `plan_inline` must be given; a relative `plan_path` is resolved against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_inline: Option<StoryboardPlan>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub steps: TimestepLadder,
    #[serde(default = "default_beta_d")]
    pub beta_d: f64,
    #[serde(default = "default_true")]
    pub dropout_enabled: bool,
    #[serde(default = "default_bounding")]
    pub bounding: Bounding,
    #[serde(default = "default_true")]
    pub merging: bool,
    #[serde(default)]
    pub merge_schedule: MergeSchedule,
    #[serde(default)]
    pub merge_same_subject_only: bool,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dump_masks: bool,
}

impl RunConfig {
    /// Defaults around an inline plan.
    pub fn with_plan(plan: StoryboardPlan) -> Self {
        RunConfig {
            plan_path: None,
            plan_inline: Some(plan),
            grid: GridSpec::default(),
            steps: TimestepLadder::default(),
            beta_d: DEFAULT_BETA_D,
            dropout_enabled: true,
            bounding: Bounding::Cross,
            merging: true,
            merge_schedule: MergeSchedule::standard(),
            merge_same_subject_only: false,
            seeds: Seeds::default(),
            model: ModelSpec::default(),
            out_dir: default_out_dir(),
            dump_masks: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::ReadInput {
            path: path.to_owned(),
            source,
        })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| HarnessError::ParseInput {
                path: path.to_owned(),
                message: e.to_string(),
            })?;
        if let (Some(plan), Some(dir)) = (&mut config.plan_path, path.parent()) {
            if plan.is_relative() {
                *plan = dir.join(&*plan);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match (&self.plan_path, &self.plan_inline) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::Config(
                    "give either plan_path or plan_inline, not both".into(),
                ))
            }
            (None, None) => {
                return Err(HarnessError::Config(
                    "one of plan_path or plan_inline is required".into(),
                ))
            }
            _ => {}
        }
        self.timesteps()?;
        self.dropout(0)?;
        let m = &self.model;
        if m.layers == 0 || m.channels == 0 || m.heads == 0 || !m.channels.is_multiple_of(m.heads) {
            return Err(HarnessError::Config(format!(
                "model needs positive layers/channels/heads with channels divisible by heads, got {m:?}"
            )));
        }
        if self.grid.h == 0 || self.grid.w == 0 {
            return Err(HarnessError::Config(
                "grid dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn timesteps(&self) -> Result<Vec<u32>, HarnessError> {
        self.steps.timesteps()
    }

    pub fn dropout(&self, seed: u64) -> Result<DropoutParams, HarnessError> {
        Ok(DropoutParams::new(self.beta_d, seed, self.dropout_enabled)?)
    }

    /// The plan, read from disk when given by path.
    pub fn resolve_plan(&self) -> Result<StoryboardPlan, HarnessError> {
        match (&self.plan_inline, &self.plan_path) {
            (Some(plan), None) => {
                plan.validate()?;
                Ok(plan.clone())
            }
            (None, Some(path)) => {
                let text =
                    std::fs::read_to_string(path).map_err(|source| HarnessError::ReadInput {
                        path: path.clone(),
                        source,
                    })?;
                Ok(parse_plan(&text)?)
            }
            _ => {
                self.validate()?;
                unreachable!("validate rejects ambiguous plan sources")
            }
        }
    }

    pub fn token_grid(&self, frames: usize) -> Result<TokenGrid, HarnessError> {
        Ok(TokenGrid::new(self.grid.h, self.grid.w, frames)?)
    }
}
