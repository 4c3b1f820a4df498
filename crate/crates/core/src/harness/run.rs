use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::denoiser::{
    toy_denoise_step, Conditioning, Mechanisms, RegionalCompositor, ToyDenoiser, ToyDenoiserConfig,
};
use super::metrics::{centroid_spread, cross_frame_consistency, pose_variance};
use super::{HarnessError, RunConfig};
use crate::masks::{plan_masks, AttentionMask};
use crate::plan::{StoryboardPlan, SubjectId};

pub const REPORT_FILE: &str = "report.json";
pub const LEAKAGE_FILE: &str = "leakage.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const MASK_DIR: &str = "masks";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLeakage {
    pub step: usize,
    pub timestep: u32,
    pub subjects: BTreeMap<SubjectId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub mean_leakage: f64,
    pub mean_consistency: f64,
    pub mean_pose_variance: f64,
    pub mean_centroid_spread: f64,
}

/// Everything a run measured. The wall-clock time is kept out of the
/// serialised report, which is therefore a pure function of the config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub version: String,
    pub config: RunConfig,
    pub frames: usize,
    pub timesteps: Vec<u32>,
    pub leakage: Vec<StepLeakage>,
    pub consistency: BTreeMap<SubjectId, f64>,
    pub pose_variance: BTreeMap<SubjectId, f64>,
    pub centroid_spread: BTreeMap<SubjectId, f64>,
    pub summary: Summary,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.config == other.config
            && self.frames == other.frames
            && self.timesteps == other.timesteps
            && self.leakage == other.leakage
            && self.consistency == other.consistency
            && self.pose_variance == other.pose_variance
            && self.centroid_spread == other.centroid_spread
            && self.summary == other.summary
    }
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serialises");
        text.push('\n');
        text
    }

    pub fn leakage_csv(&self) -> String {
        let mut out = String::from("step,subject_id,leakage\n");
        for s in &self.leakage {
            for (id, v) in &s.subjects {
                out.push_str(&format!("{},{},{}\n", s.step, csv_field(id.as_str()), v));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpedMask {
    pub step: usize,
    pub layer: usize,
    pub mask: AttentionMask,
}

impl DumpedMask {
    pub fn file_name(&self) -> String {
        format!("mask_s{:03}_l{}.pgm", self.step, self.layer)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub final_state: Array3<f64>,
    /// Empty unless the config asks for mask dumps.
    pub masks: Vec<DumpedMask>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs the full timestep ladder on `plan` without touching the
/// filesystem.
pub fn simulate(config: &RunConfig, plan: &StoryboardPlan) -> Result<RunOutput, HarnessError> {
    let started = Instant::now();
    config.validate()?;
    plan.validate()?;
    let timesteps = config.timesteps()?;
    let grid = config.token_grid(plan.frame_count())?;
    let masks = plan_masks(plan, &grid)?;
    let model = ToyDenoiser::new(ToyDenoiserConfig {
        layers: config.model.layers,
        channels: config.model.channels,
        heads: config.model.heads,
        grid,
        weight_seed: config.seeds.weights,
    })?;
    let sampler = RegionalCompositor::new(Conditioning::from_plan(
        plan,
        &masks,
        &grid,
        config.model.layers,
        config.model.channels,
    )?);
    let mechanisms = Mechanisms {
        bounding: config.bounding,
        dropout: config.dropout(config.seeds.dropout)?,
        merging: config.merging,
        schedule: config.merge_schedule.clone(),
        same_subject_only: config.merge_same_subject_only,
        record_masks: config.dump_masks,
    };

    let mut state = model.initial_latents(config.seeds.noise);
    let mut leakage = Vec::with_capacity(timesteps.len());
    let mut dumped = Vec::new();
    for (step, &t) in timesteps.iter().enumerate() {
        let out = toy_denoise_step(&model, state.view(), t, step, &masks, &mechanisms, &sampler)?;
        state = out.state;
        leakage.push(StepLeakage {
            step,
            timestep: t,
            subjects: out.leakage,
        });
        dumped.extend(
            out.masks
                .into_iter()
                .enumerate()
                .map(|(layer, mask)| DumpedMask { step, layer, mask }),
        );
    }

    let consistency = cross_frame_consistency(state.view(), &masks);
    let pose = pose_variance(state.view(), &masks, &grid);
    let spread = centroid_spread(state.view(), &masks, &grid);
    let summary = Summary {
        mean_leakage: mean(leakage.iter().flat_map(|s| s.subjects.values().copied())),
        mean_consistency: mean(consistency.values().copied()),
        mean_pose_variance: mean(pose.values().copied()),
        mean_centroid_spread: mean(spread.values().copied()),
    };
    let report = RunReport {
        version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        frames: plan.frame_count(),
        timesteps,
        leakage,
        consistency,
        pose_variance: pose,
        centroid_spread: spread,
        summary,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        report,
        final_state: state,
        masks: dumped,
    })
}

/// Resolves the plan, simulates, and writes the report (and masks when
/// asked) to the configured output directory.
pub fn run_storyboard(config: &RunConfig) -> Result<RunReport, HarnessError> {
    let plan = config.resolve_plan()?;
    let out = simulate(config, &plan)?;
    emit_report(&out.report, &config.out_dir)?;
    if config.dump_masks {
        emit_masks(&out.masks, &config.out_dir)?;
    }
    Ok(out.report)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|source| HarnessError::Write {
        path: path.to_owned(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Write {
        path: dir.to_owned(),
        source,
    })
}

/// Writes `report.json`, `leakage.csv` and `timing.json` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write(&dir.join(REPORT_FILE), report.to_json().as_bytes())?;
    write(&dir.join(LEAKAGE_FILE), report.leakage_csv().as_bytes())?;
    let timing = serde_json::json!({ "wall_clock_seconds": report.wall_clock_seconds });
    write(&dir.join(TIMING_FILE), format!("{timing}\n").as_bytes())
}

/// Writes each mask as a binary PGM under `dir/masks`.
pub fn emit_masks(masks: &[DumpedMask], dir: &Path) -> Result<(), HarnessError> {
    let dir = dir.join(MASK_DIR);
    create_dir(&dir)?;
    for m in masks {
        let mut bytes = Vec::new();
        m.mask.write_pgm(&mut bytes).expect("writing to a Vec");
        write(&dir.join(m.file_name()), &bytes)?;
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RunReport, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::ReadInput {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::ParseInput {
        path: path.to_owned(),
        message: e.to_string(),
    })
}
