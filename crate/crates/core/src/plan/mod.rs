//! Storyboard plans: per-frame global prompts plus per-subject local prompts
//! and bounding boxes.
//!
//! Plans travel as a JSON document with the top-level keys `prompt`,
//! `frame_count`, `subjects` and `frames`. Boxes are written as
//! `[x0, y0, x1, y1]` in normalised image coordinates with the origin at the
//! top-left corner. [`serialize_plan`] produces a canonical form, so two
//! structurally equal plans always serialise to identical text.

mod mock;
mod planner;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use mock::{mock_plan, MAX_MOCK_SUBJECTS};
pub use planner::{
    bundled_exemplars, extract_json_block, plan_storyboard, ChatClient, ChatMessage, ChatRequest,
    Exemplar, HttpChatClient, MockChatClient, PlanOutcome, PlannerConfig, Role, ScriptedChatClient,
    TransportError, API_KEY_ENV, DEFAULT_MAX_ATTEMPTS, TASK_DESCRIPTION,
};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("plan schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid plan: {}", .violations.join("; "))]
    Validation { violations: Vec<String> },
    #[error("cannot tile {requested} subjects, the mock planner supports at most {max}")]
    Capacity { requested: usize, max: usize },
    #[error("chat transport failed after {attempts} attempt(s): {source}")]
    Transport {
        attempts: u32,
        #[source]
        source: TransportError,
    },
    #[error("model output unusable after {attempts} attempt(s): {message}")]
    Unparseable {
        attempts: u32,
        message: String,
        raw: String,
    },
    #[error("invalid planner configuration: {0}")]
    Config(String),
}

impl PlanError {
    fn invalid(message: impl Into<String>) -> Self {
        PlanError::Validation {
            violations: vec![message.into()],
        }
    }

    /// True for errors caused by the plan content or its inputs rather than
    /// by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, PlanError::Transport { .. })
    }
}

/// Stable identity of a subject across frames.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(String);

impl SubjectId {
    pub fn new(id: impl Into<String>) -> Self {
        SubjectId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubjectId {
    fn from(s: &str) -> Self {
        SubjectId(s.to_owned())
    }
}

/// The free-form story prompt and the number of frames to plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryPrompt {
    pub text: String,
    pub frame_count: usize,
}

impl StoryPrompt {
    pub fn new(text: impl Into<String>, frame_count: usize) -> Result<Self, PlanError> {
        let prompt = StoryPrompt {
            text: text.into(),
            frame_count,
        };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let mut violations = Vec::new();
        self.collect_violations(&mut violations);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(PlanError::Validation { violations })
        }
    }

    fn collect_violations(&self, out: &mut Vec<String>) {
        if self.text.trim().is_empty() {
            out.push("prompt: text must not be empty".into());
        }
        if self.frame_count == 0 {
            out.push("frame_count: must be at least 1".into());
        }
    }
}

/// Axis-aligned box in normalised coordinates, `0 <= x0 < x1 <= 1` and
/// `0 <= y0 < y1 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, PlanError> {
        let b = BoundingBox { x0, y0, x1, y1 };
        match b.violation() {
            None => Ok(b),
            Some(v) => Err(PlanError::invalid(format!("box {b}: {v}"))),
        }
    }

    /// Unit box covering the whole frame.
    pub fn full() -> Self {
        BoundingBox {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    fn violation(&self) -> Option<&'static str> {
        let BoundingBox { x0, y0, x1, y1 } = *self;
        if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0) {
            Some("requires 0 <= x0 < x1 <= 1")
        } else if !(0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
            Some("requires 0 <= y0 < y1 <= 1")
        } else {
            None
        }
    }

    pub fn is_valid(&self) -> bool {
        self.violation().is_none()
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x0, self.y0, self.x1, self.y1)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        // `+ 0.0` folds -0.0 into 0.0 so equal boxes print identically.
        [self.x0 + 0.0, self.y0 + 0.0, self.x1 + 0.0, self.y1 + 0.0].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        // Range checks happen during plan validation so the error can name
        // the frame and subject that own the box.
        let [x0, y0, x1, y1] = <[f64; 4]>::deserialize(deserializer)?;
        Ok(BoundingBox { x0, y0, x1, y1 })
    }
}

/// One subject's local prompt and placement within a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectLayout {
    pub subject_id: SubjectId,
    pub local_prompt: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePlan {
    /// 1-based frame ordinal.
    pub index: usize,
    pub global_prompt: String,
    pub layouts: Vec<SubjectLayout>,
}

/// Full planning output: one [`FramePlan`] per requested frame plus the
/// registry of subjects that recur across frames.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryboardPlan {
    pub prompt: StoryPrompt,
    pub subjects: BTreeMap<SubjectId, String>,
    pub frames: Vec<FramePlan>,
}

impl StoryboardPlan {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn subject_ids(&self) -> impl Iterator<Item = &SubjectId> {
        self.subjects.keys()
    }

    /// Every broken invariant, each prefixed with the path of the offending
    /// field.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.prompt.collect_violations(&mut out);
        if self.frames.len() != self.prompt.frame_count {
            out.push(format!(
                "frames: expected {} frames (frame_count) but found {}",
                self.prompt.frame_count,
                self.frames.len()
            ));
        }
        for (id, description) in &self.subjects {
            if id.as_str().trim().is_empty() {
                out.push("subjects: subject ids must not be empty".into());
            }
            if description.trim().is_empty() {
                out.push(format!("subjects.{id}: description must not be empty"));
            }
        }

        let mut seen_anywhere = BTreeSet::new();
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.index != f + 1 {
                out.push(format!(
                    "frames[{f}].index: expected {} but found {}",
                    f + 1,
                    frame.index
                ));
            }
            if frame.global_prompt.trim().is_empty() {
                out.push(format!("frames[{f}].global_prompt: must not be empty"));
            }
            if frame.layouts.is_empty() {
                out.push(format!(
                    "frames[{f}].layouts: at least one subject layout is required"
                ));
            }
            let mut seen_here = BTreeSet::new();
            for (l, layout) in frame.layouts.iter().enumerate() {
                let at = format!("frames[{f}].layouts[{l}]");
                let id = &layout.subject_id;
                if !self.subjects.contains_key(id) {
                    out.push(format!(
                        "{at}.subject_id: `{id}` is not in the subject registry"
                    ));
                }
                if !seen_here.insert(id) {
                    out.push(format!(
                        "{at}.subject_id: `{id}` appears twice in frame {}",
                        f + 1
                    ));
                }
                seen_anywhere.insert(id);
                if layout.local_prompt.trim().is_empty() {
                    out.push(format!("{at}.local_prompt: must not be empty"));
                }
                if let Some(v) = layout.bbox.violation() {
                    out.push(format!("{at}.box {} for `{id}`: {v}", layout.bbox));
                }
            }
        }
        for id in self.subjects.keys() {
            if !seen_anywhere.contains(id) {
                out.push(format!("subjects.{id}: subject never appears in any frame"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(PlanError::Validation { violations })
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDocument {
    prompt: String,
    frame_count: usize,
    subjects: BTreeMap<SubjectId, String>,
    frames: Vec<FramePlan>,
}

impl Serialize for StoryboardPlan {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PlanDocumentRef {
            prompt: &self.prompt.text,
            frame_count: self.prompt.frame_count,
            subjects: &self.subjects,
            frames: &self.frames,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StoryboardPlan {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = PlanDocument::deserialize(deserializer)?;
        Ok(StoryboardPlan {
            prompt: StoryPrompt {
                text: doc.prompt,
                frame_count: doc.frame_count,
            },
            subjects: doc.subjects,
            frames: doc.frames,
        })
    }
}

#[derive(Serialize)]
struct PlanDocumentRef<'a> {
    prompt: &'a str,
    frame_count: usize,
    subjects: &'a BTreeMap<SubjectId, String>,
    frames: &'a [FramePlan],
}

/// Parses and validates a plan document.
pub fn parse_plan(text: &str) -> Result<StoryboardPlan, PlanError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let plan: StoryboardPlan = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        json_error(e.into_inner(), Some(path))
    })?;
    de.end().map_err(|e| json_error(e, None))?;
    plan.validate()?;
    Ok(plan)
}

fn json_error(e: serde_json::Error, path: Option<String>) -> PlanError {
    use serde_json::error::Category;
    match (e.classify(), path) {
        (Category::Data, Some(path)) => PlanError::Schema {
            path,
            message: e.to_string(),
        },
        _ => PlanError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    }
}

/// Canonical text form: pretty-printed JSON with a fixed key order and a
/// trailing newline.
pub fn serialize_plan(plan: &StoryboardPlan) -> String {
    let mut text = serde_json::to_string_pretty(plan).expect("plan serialisation is infallible");
    text.push('\n');
    text
}
