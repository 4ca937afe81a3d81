//! Advantage calibration for multi-turn search rollouts.
//!
//! Three stages rewrite a broadcast GRPO assignment, always in this order:
//!
//! 1. **Think-prefix decoupling**: steps whose opening think tag was supplied
//!    by the harness drop those tokens from the loss mask.
//! 2. **Soft penalization**: a negative advantage on an intermediate step is
//!    scaled by `1 - c_s`, where `c_s` is the fraction of the step's retrieved
//!    documents that some correct rollout of the same group also retrieved.
//! 3. **Final-step rebalance**: positive final-answer advantages are scaled by
//!    `λ · |A⁻| / A⁺`, the token-weighted negative-to-positive magnitude ratio
//!    over the group's final-answer steps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{broadcast, normalized_advantages, stable_sum, AdvantageAssignment};
use crate::rewards::{final_reward, RewardBreakdown};
use crate::trace::{DocumentId, RolloutGroup, Step};

pub const DEFAULT_THINK_PREFIX_TOKENS: usize = 2;
pub const DEFAULT_PPL_THRESHOLD: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub lambda: f64,
    /// Minimum `r_final` for a rollout to count as correct.
    pub correctness_threshold: f64,
    pub eps: f64,
    /// Divide centered rewards by the group standard deviation.
    pub scale_by_std: bool,
    pub think_prefix_tokens: usize,
    pub ppl_threshold: f64,
    pub enable_soft_penalty: bool,
    pub enable_rebalance: bool,
    pub enable_decouple_think: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            lambda: 1.0,
            correctness_threshold: 0.5,
            eps: 1e-6,
            scale_by_std: true,
            think_prefix_tokens: DEFAULT_THINK_PREFIX_TOKENS,
            ppl_threshold: DEFAULT_PPL_THRESHOLD,
            enable_soft_penalty: true,
            enable_rebalance: true,
            enable_decouple_think: true,
        }
    }
}

impl CalibrationConfig {
    /// Plain GRPO: every calibration stage off.
    pub fn baseline() -> Self {
        CalibrationConfig {
            enable_soft_penalty: false,
            enable_rebalance: false,
            enable_decouple_think: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.correctness_threshold > 0.0 && self.correctness_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "correctness_threshold must lie in (0, 1], got {}",
                self.correctness_threshold
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.ppl_threshold >= 1.0 && self.ppl_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "ppl_threshold must be a finite value >= 1, got {}",
                self.ppl_threshold
            )));
        }
        Ok(())
    }

    pub fn any_stage_enabled(&self) -> bool {
        self.enable_soft_penalty || self.enable_rebalance || self.enable_decouple_think
    }
}

/// Union of documents retrieved by the correct rollouts of one group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilverDocSet {
    pub question_id: String,
    pub docs: BTreeSet<DocumentId>,
    /// Number of correct rollouts that contributed (possibly with no documents).
    pub source_rollout_count: usize,
}

impl SilverDocSet {
    pub fn contains(&self, doc: &DocumentId) -> bool {
        self.docs.contains(doc)
    }
}

pub fn silver_documents(group: &RolloutGroup, rewards: &[RewardBreakdown], threshold: f64) -> Result<SilverDocSet> {
    if rewards.len() != group.rollouts.len() {
        return Err(Error::Shape(format!(
            "group `{}` has {} rollouts but {} rewards",
            group.question_id,
            group.rollouts.len(),
            rewards.len()
        )));
    }
    let mut docs = BTreeSet::new();
    let mut count = 0;
    for (rollout, reward) in group.rollouts.iter().zip(rewards) {
        if reward.r_final >= threshold {
            count += 1;
            docs.extend(rollout.steps.iter().flat_map(|s| s.retrieved_docs.iter().cloned()));
        }
    }
    Ok(SilverDocSet {
        question_id: group.question_id.clone(),
        docs,
        source_rollout_count: count,
    })
}

/// Fraction of the step's distinct retrieved documents that are silver;
/// 0 for a step that retrieved nothing.
pub fn step_correctness(step: &Step, silver: &SilverDocSet) -> Result<f64> {
    if step.is_final() {
        return Err(Error::InvalidArgument(format!(
            "step {} is a final answer; correctness is defined for intermediate steps only",
            step.index
        )));
    }
    let retrieved: BTreeSet<&DocumentId> = step.retrieved_docs.iter().collect();
    if retrieved.is_empty() {
        return Ok(0.0);
    }
    let hits = retrieved.iter().filter(|d| silver.contains(d)).count();
    Ok(hits as f64 / retrieved.len() as f64)
}

pub fn soft_penalize(advantage: f64, c_s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c_s) {
        return Err(Error::InvalidArgument(format!(
            "correctness score must lie in [0, 1], got {c_s}"
        )));
    }
    Ok(if advantage < 0.0 {
        advantage * (1.0 - c_s)
    } else {
        advantage
    })
}

/// Token-weighted positive and absolute negative advantage mass at the
/// final-answer steps of a group.
pub fn final_step_mass(assignment: &AdvantageAssignment, group: &RolloutGroup) -> Result<(f64, f64)> {
    assignment.check_shape(group)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, rollout) in group.rollouts.iter().enumerate() {
        if rollout.has_final_answer() {
            let s = rollout.steps.len() - 1;
            let weighted = assignment.per_rollout[i][s] * assignment.mask_tokens[i][s] as f64;
            if weighted > 0.0 {
                pos.push(weighted);
            } else if weighted < 0.0 {
                neg.push(-weighted);
            }
        }
    }
    Ok((stable_sum(pos), stable_sum(neg)))
}

/// Scales positive final-answer advantages by `lambda · |A⁻| / A⁺`.
///
/// No-op when there is no positive mass; positives are left unchanged when
/// there is no negative mass.
pub fn rebalance_final(
    assignment: &AdvantageAssignment,
    group: &RolloutGroup,
    lambda: f64,
) -> Result<AdvantageAssignment> {
    let (pos, neg) = final_step_mass(assignment, group)?;
    let mut out = assignment.clone();
    if pos == 0.0 || neg == 0.0 {
        return Ok(out);
    }
    let scale = lambda * (neg / pos);
    for (i, rollout) in group.rollouts.iter().enumerate() {
        if rollout.has_final_answer() {
            let a = &mut out.per_rollout[i][rollout.steps.len() - 1];
            if *a > 0.0 {
                *a *= scale;
            }
        }
    }
    Ok(out)
}

/// Removes harness-supplied think-tag tokens from the loss mask.
pub fn decouple_think(
    assignment: &AdvantageAssignment,
    group: &RolloutGroup,
    prefix_tokens: usize,
) -> Result<AdvantageAssignment> {
    assignment.check_shape(group)?;
    let mut out = assignment.clone();
    for (rollout, mask) in group.rollouts.iter().zip(out.mask_tokens.iter_mut()) {
        for (step, m) in rollout.steps.iter().zip(mask.iter_mut()) {
            if step.prefix_supplied {
                *m = m.saturating_sub(prefix_tokens);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedGroup {
    pub assignment: AdvantageAssignment,
    pub silver: SilverDocSet,
    pub rewards: Vec<RewardBreakdown>,
    /// Per-rollout group-relative advantages before any calibration.
    pub rollout_advantages: Vec<f64>,
}

/// Rewards, GRPO advantages and broadcast for a group, before calibration.
pub fn baseline_group(group: &RolloutGroup, config: &CalibrationConfig) -> Result<CalibratedGroup> {
    let rewards: Vec<RewardBreakdown> = group
        .rollouts
        .iter()
        .map(|r| final_reward(r, &group.reference_answer))
        .collect();
    let finals: Vec<f64> = rewards.iter().map(|r| r.r_final).collect();
    let rollout_advantages = normalized_advantages(&finals, config.eps, config.scale_by_std)?;
    let assignment = broadcast(group, &rollout_advantages)?;
    let silver = silver_documents(group, &rewards, config.correctness_threshold)?;
    Ok(CalibratedGroup {
        assignment,
        silver,
        rewards,
        rollout_advantages,
    })
}

pub fn calibrate_group(group: &RolloutGroup, config: &CalibrationConfig) -> Result<CalibratedGroup> {
    config.validate()?;
    let mut out = baseline_group(group, config)?;
    if config.enable_decouple_think {
        out.assignment = decouple_think(&out.assignment, group, config.think_prefix_tokens)?;
    }
    if config.enable_soft_penalty {
        for (rollout, adv) in group.rollouts.iter().zip(out.assignment.per_rollout.iter_mut()) {
            for (step, a) in rollout.steps.iter().zip(adv.iter_mut()) {
                if !step.is_final() {
                    *a = soft_penalize(*a, step_correctness(step, &out.silver)?)?;
                }
            }
        }
    }
    if config.enable_rebalance {
        out.assignment = rebalance_final(&out.assignment, group, config.lambda)?;
    }
    Ok(out)
}
