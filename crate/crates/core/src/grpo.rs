//! Standard group-relative advantages, broadcast uniformly to every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::RolloutGroup;

/// Per-rollout, per-step advantages plus the number of tokens in each step
/// that receive them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageAssignment {
    pub per_rollout: Vec<Vec<f64>>,
    pub mask_tokens: Vec<Vec<usize>>,
}

impl AdvantageAssignment {
    /// Checks that the assignment has one value per step of `group` and that
    /// no mask exceeds its step's token count.
    pub fn check_shape(&self, group: &RolloutGroup) -> Result<()> {
        if self.per_rollout.len() != group.rollouts.len() || self.mask_tokens.len() != group.rollouts.len() {
            return Err(Error::Shape(format!(
                "group `{}` has {} rollouts, assignment has {} advantage rows and {} mask rows",
                group.question_id,
                group.rollouts.len(),
                self.per_rollout.len(),
                self.mask_tokens.len()
            )));
        }
        for ((rollout, adv), mask) in group.rollouts.iter().zip(&self.per_rollout).zip(&self.mask_tokens) {
            if adv.len() != rollout.steps.len() || mask.len() != rollout.steps.len() {
                return Err(Error::Shape(format!(
                    "rollout `{}` has {} steps, assignment has {} advantages and {} masks",
                    rollout.rollout_id,
                    rollout.steps.len(),
                    adv.len(),
                    mask.len()
                )));
            }
            if let Some(s) = rollout.steps.iter().zip(mask).position(|(st, m)| *m > st.token_count) {
                return Err(Error::Shape(format!(
                    "rollout `{}` step {s}: mask {} exceeds token_count {}",
                    rollout.rollout_id, mask[s], rollout.steps[s].token_count
                )));
            }
        }
        Ok(())
    }

    /// Iterates `(advantage, mask_tokens)` over every step of every rollout.
    pub fn steps(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.per_rollout
            .iter()
            .zip(&self.mask_tokens)
            .flat_map(|(a, m)| a.iter().copied().zip(m.iter().copied()))
    }
}

/// Order-independent sum: bitwise identical for any permutation of the inputs.
pub(crate) fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// `(r_i - mean) / (std + eps)` with population standard deviation.
/// A group whose rewards are all equal gets exactly zero advantages.
pub fn group_relative_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    normalized_advantages(rewards, eps, true)
}

/// Like [`group_relative_advantages`]; with `scale_by_std = false` only the
/// group mean is subtracted.
pub fn normalized_advantages(rewards: &[f64], eps: f64, scale_by_std: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group-relative advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eps must be finite and >= 0, got {eps}"
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite reward {r}")));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = stable_sum(rewards.to_vec()) / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !scale_by_std {
        return Ok(centered);
    }
    let std = (stable_sum(centered.iter().map(|c| c * c).collect()) / n).sqrt();
    Ok(centered.into_iter().map(|c| c / (std + eps)).collect())
}

/// Gives every step of rollout `i` the advantage `rollout_advantages[i]`,
/// with the full token count of each step in the loss mask.
pub fn broadcast(group: &RolloutGroup, rollout_advantages: &[f64]) -> Result<AdvantageAssignment> {
    if group.rollouts.len() != rollout_advantages.len() {
        return Err(Error::Shape(format!(
            "group `{}` has {} rollouts but {} advantages were given",
            group.question_id,
            group.rollouts.len(),
            rollout_advantages.len()
        )));
    }
    let per_rollout = group
        .rollouts
        .iter()
        .zip(rollout_advantages)
        .map(|(r, &a)| vec![a; r.steps.len()])
        .collect();
    let mask_tokens = group
        .rollouts
        .iter()
        .map(|r| r.steps.iter().map(|s| s.token_count).collect())
        .collect();
    Ok(AdvantageAssignment {
        per_rollout,
        mask_tokens,
    })
}
