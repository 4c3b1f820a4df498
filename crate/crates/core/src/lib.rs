//! Training-free multi-subject consistency mechanisms for storyboard
//! generation, verified on a desk-scale toy denoiser.
//!
//! The crate is organised bottom-up:
//!
//! - [`plan`]: storyboard plans (frame prompts and per-subject boxes), the
//!   chat-completion planner and a deterministic mock.
//! - [`masks`]: box rasterisation and the intra-frame / cross-frame attention
//!   masks with the dropout bias term.
//! - [`attention`]: numerically stable bounded self-attention, its brute-force
//!   oracle and the leakage metric.
//! - [`tokenmerge`]: cross-frame token matching, merging and the timestep
//!   dependent merge schedule.
//! - [`harness`]: the toy denoiser, end-to-end runs, reports and paired
//!   ablation comparisons.
//! - [`cli`]: the `storyboard` command-line front end.

pub mod attention;
pub mod cli;
pub mod harness;
pub mod masks;
pub mod plan;
pub mod rng;
pub mod tokenmerge;

pub use attention::{AttentionError, AttentionResult, ProjectionSet};
pub use harness::{HarnessError, RunConfig, RunReport};
pub use masks::{AttentionMask, DropoutParams, MaskError, SubjectMask, TokenGrid};
pub use plan::{PlanError, StoryboardPlan};
pub use tokenmerge::{MergeError, MergeSchedule};
