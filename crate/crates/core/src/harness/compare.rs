use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, Bounding, HarnessError, RunConfig, Summary};
use crate::plan::StoryboardPlan;

/// A mechanism toggled in a paired comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Cross-frame bounding against unbounded joint attention; compares
    /// mean leakage, expected lower with bounding.
    Bounding,
    /// Token merging on against off under cross bounding; compares mean
    /// consistency, expected higher with merging.
    Merging,
    /// The configured schedule against the same schedule without its
    /// negative windows; compares pose variance, expected higher with them.
    NegativeWindow,
}

impl Ablation {
    pub fn metric(&self) -> &'static str {
        match self {
            Ablation::Bounding => "mean_leakage",
            Ablation::Merging => "mean_consistency",
            Ablation::NegativeWindow => "mean_pose_variance",
        }
    }

    /// True when the mechanism should lower the metric.
    pub fn expects_lower(&self) -> bool {
        matches!(self, Ablation::Bounding)
    }

    fn read(&self, s: &Summary) -> f64 {
        match self {
            Ablation::Bounding => s.mean_leakage,
            Ablation::Merging => s.mean_consistency,
            Ablation::NegativeWindow => s.mean_pose_variance,
        }
    }

    /// The config pair (with, without) for this ablation.
    pub fn arms(&self, base: &RunConfig) -> (RunConfig, RunConfig) {
        let mut with = base.clone();
        let mut without = base.clone();
        match self {
            Ablation::Bounding => {
                with.bounding = Bounding::Cross;
                without.bounding = Bounding::Off;
            }
            Ablation::Merging => {
                with.bounding = Bounding::Cross;
                without.bounding = Bounding::Cross;
                with.merging = true;
                without.merging = false;
            }
            Ablation::NegativeWindow => {
                with.merging = true;
                without.merging = true;
                without.merge_schedule = base.merge_schedule.without_negative_windows();
            }
        }
        (with, without)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Bounding => "bounding",
            Ablation::Merging => "merging",
            Ablation::NegativeWindow => "negative-window",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed_offset: u64,
    pub with: f64,
    pub without: f64,
    /// Full summaries of both arms, for looking at secondary metrics.
    pub with_summary: Summary,
    pub without_summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ablation: Ablation,
    pub metric: String,
    pub rows: Vec<PairedRow>,
    pub mean_with: f64,
    pub mean_without: f64,
    /// Pairs that moved in the expected direction.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign-test p-value for the expected direction.
    pub p_value: f64,
}

impl Comparison {
    /// Mean moved the expected way and the sign test rejects at `level`.
    pub fn holds(&self, level: f64) -> bool {
        let direction = if self.ablation.expects_lower() {
            self.mean_with < self.mean_without
        } else {
            self.mean_with > self.mean_without
        };
        direction && self.p_value < level
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "ablation: {}  metric: {}  expected: {} with the mechanism\n",
            self.ablation,
            self.metric,
            if self.ablation.expects_lower() {
                "lower"
            } else {
                "higher"
            }
        );
        out.push_str(&format!(
            "{:>6}  {:>14}  {:>14}\n",
            "seed", "with", "without"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6}  {:>14.6}  {:>14.6}\n",
                r.seed_offset, r.with, r.without
            ));
        }
        out.push_str(&format!(
            "{:>6}  {:>14.6}  {:>14.6}\n",
            "mean", self.mean_with, self.mean_without
        ));
        out.push_str(&format!(
            "wins {}  losses {}  ties {}  sign-test p = {:.3e}\n",
            self.wins, self.losses, self.ties, self.p_value
        ));
        out
    }
}

/// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test_p_value(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if wins == 0 {
        return 1.0;
    }
    // accumulate C(n, k) / 2^n in log space to stay finite for large n
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (ln_choose + ln_half_n).exp();
        }
    }
    total.min(1.0)
}

/// Runs both arms of `ablation` for seed offsets `0..seeds` in parallel and
/// tallies the paired differences.
pub fn compare(
    base: &RunConfig,
    plan: &StoryboardPlan,
    ablation: Ablation,
    seeds: usize,
) -> Result<Comparison, HarnessError> {
    if seeds == 0 {
        return Err(HarnessError::Config(
            "compare needs at least one seed".into(),
        ));
    }
    let (with, without) = ablation.arms(base);
    let rows = (0..seeds as u64)
        .into_par_iter()
        .map(|i| {
            let run = |c: &RunConfig| -> Result<Summary, HarnessError> {
                let mut c = c.clone();
                c.seeds = base.seeds.offset(i);
                c.dump_masks = false;
                Ok(simulate(&c, plan)?.report.summary)
            };
            let (a, b) = (run(&with)?, run(&without)?);
            Ok(PairedRow {
                seed_offset: i,
                with: ablation.read(&a),
                without: ablation.read(&b),
                with_summary: a,
                without_summary: b,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for r in &rows {
        let better = if ablation.expects_lower() {
            r.with < r.without
        } else {
            r.with > r.without
        };
        if r.with == r.without {
            ties += 1;
        } else if better {
            wins += 1;
        } else {
            losses += 1;
        }
    }
    let n = rows.len() as f64;
    Ok(Comparison {
        ablation,
        metric: ablation.metric().to_owned(),
        mean_with: rows.iter().map(|r| r.with).sum::<f64>() / n,
        mean_without: rows.iter().map(|r| r.without).sum::<f64>() / n,
        rows,
        wins,
        losses,
        ties,
        p_value: sign_test_p_value(wins, losses),
    })
}
