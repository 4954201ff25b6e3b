//! Cubic kept-fraction schedule: r(t) = 1 until `start_step`, then decays
//! cubically to `final_fraction` at `end_step` and stays there.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::groups::GroupKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsitySchedule {
    /// t_i: last step at which everything is still kept.
    pub start_step: usize,
    /// t_f: step at which the final fraction is reached. Equal to
    /// `start_step` for single-shot pruning (the fraction jumps straight to
    /// `final_fraction`).
    pub end_step: usize,
    /// r_f in (0, 1].
    pub final_fraction: f64,
    /// Total training steps T.
    pub total_steps: usize,
    /// Optional per-group-kind t_f overrides.
    #[serde(default)]
    pub group_end_overrides: BTreeMap<GroupKind, usize>,
}

impl SparsitySchedule {
    pub fn uniform(start_step: usize, end_step: usize, final_fraction: f64, total_steps: usize) -> SparsitySchedule {
        SparsitySchedule {
            start_step,
            end_step,
            final_fraction,
            total_steps,
            group_end_overrides: BTreeMap::new(),
        }
    }

    /// Output-side matrices finish pruning early, query/key and ffn-input
    /// late, the rest in between.
    pub fn with_per_group_ends(mut self) -> SparsitySchedule {
        let t = self.total_steps;
        self.group_end_overrides.insert(GroupKind::Hidden, t / 2);
        self.group_end_overrides.insert(GroupKind::QueryKey, t * 9 / 10);
        self.group_end_overrides.insert(GroupKind::FfnInner, t * 9 / 10);
        self.group_end_overrides.insert(GroupKind::ValueOutput, t * 7 / 10);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_fraction > 0.0 && self.final_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "final_fraction {} must lie in (0, 1]",
                self.final_fraction
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        let ends =
            std::iter::once(self.end_step).chain(self.group_end_overrides.values().copied());
        for end in ends {
            if self.start_step > end || end > self.total_steps {
                return Err(Error::Config(format!(
                    "schedule needs start_step <= end_step <= total_steps, got {} / {} / {}",
                    self.start_step, end, self.total_steps
                )));
            }
        }
        Ok(())
    }

    fn end_for(&self, kind: GroupKind) -> usize {
        *self.group_end_overrides.get(&kind).unwrap_or(&self.end_step)
    }

    /// Kept fraction for iteration `t` and a group kind.
    pub fn fraction_at(&self, t: usize, kind: GroupKind) -> f64 {
        assert!(t < self.total_steps, "step {} out of range 0..{}", t, self.total_steps);
        schedule_fraction(t, self.start_step, self.end_for(kind), self.final_fraction)
    }

    /// True when some group prunes at step 0 (single-shot at init).
    pub fn prunes_at_start(&self) -> bool {
        let kinds = [GroupKind::Hidden, GroupKind::QueryKey, GroupKind::ValueOutput, GroupKind::FfnInner];
        kinds.iter().any(|&k| self.fraction_at(0, k) < 1.0)
    }
}

/// The piecewise cubic: 1 before t_i, r_f from t_f on, and
/// r_f + (1 - r_f) (1 - (t - t_i)/(t_f - t_i))^3 in between.
pub fn schedule_fraction(t: usize, start: usize, end: usize, final_fraction: f64) -> f64 {
    if t < start {
        1.0
    } else if t >= end {
        final_fraction
    } else {
        let progress = (t - start) as f64 / (end - start) as f64;
        let rem = 1.0 - progress;
        final_fraction + (1.0 - final_fraction) * rem * rem * rem
    }
}
