//! Diagnostics over rollouts and their advantages: how often correct
//! intermediate steps are penalized, perplexity of sampled outputs, and the
//! balance between negative and positive advantage mass.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::calibration::{silver_documents, step_correctness, CalibrationConfig};
use crate::error::{Error, Result};
use crate::grpo::{stable_sum, AdvantageAssignment};
use crate::rewards::final_reward;
use crate::trace::{RolloutGroup, RolloutTrace};

/// Fraction of negatively-advantaged intermediate steps at one turn index
/// whose retrieved documents are all silver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MispenaltyRow {
    pub step_index: usize,
    pub proportion: f64,
    /// Number of qualifying negative steps (the denominator).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TelemetryRecord {
    pub training_step: u64,
    /// Mean negative log-probability of sampled tokens inside the loss mask.
    /// Stands in for policy entropy when only sampled tokens are known.
    pub mean_token_nll: f64,
    pub perplexity: f64,
    pub neg_pos_ratio: Option<f64>,
    pub high_ppl_ratio: f64,
    pub mispenalty_by_step: Vec<MispenaltyRow>,
    pub policy_entropy: Option<f64>,
    pub success_rate: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "training_step",
    "mean_token_nll",
    "perplexity",
    "neg_pos_ratio",
    "high_ppl_ratio",
    "policy_entropy",
    "success_rate",
];

fn check_aligned(groups: &[RolloutGroup], assignments: &[AdvantageAssignment]) -> Result<()> {
    if groups.len() != assignments.len() {
        return Err(Error::Shape(format!(
            "{} groups but {} assignments",
            groups.len(),
            assignments.len()
        )));
    }
    groups.iter().zip(assignments).try_for_each(|(g, a)| a.check_shape(g))
}

pub fn mispenalty_rate(
    groups: &[RolloutGroup],
    assignments: &[AdvantageAssignment],
    config: &CalibrationConfig,
) -> Result<Vec<MispenaltyRow>> {
    check_aligned(groups, assignments)?;
    let per_group: Vec<BTreeMap<usize, (usize, usize)>> = groups
        .par_iter()
        .zip(assignments)
        .map(|(group, assignment)| {
            let rewards: Vec<_> = group
                .rollouts
                .iter()
                .map(|r| final_reward(r, &group.reference_answer))
                .collect();
            let silver = silver_documents(group, &rewards, config.correctness_threshold)?;
            let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for (rollout, adv) in group.rollouts.iter().zip(&assignment.per_rollout) {
                for (step, &a) in rollout.steps.iter().zip(adv) {
                    if step.is_final() || a >= 0.0 || step.retrieved_docs.is_empty() {
                        continue;
                    }
                    let entry = tally.entry(step.index).or_default();
                    entry.1 += 1;
                    if step_correctness(step, &silver)? == 1.0 {
                        entry.0 += 1;
                    }
                }
            }
            Ok(tally)
        })
        .collect::<Result<_>>()?;

    let mut total: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for tally in per_group {
        for (k, (hit, n)) in tally {
            let e = total.entry(k).or_default();
            e.0 += hit;
            e.1 += n;
        }
    }
    Ok(total
        .into_iter()
        .map(|(step_index, (hit, n))| MispenaltyRow {
            step_index,
            proportion: hit as f64 / n as f64,
            count: n,
        })
        .collect())
}

/// Sum of negative log-probabilities and token count over the masked tokens
/// of a rollout. A step's masked tokens are its trailing `mask[s]` tokens;
/// the leading ones are the think-tag prefix when it was decoupled.
pub fn masked_nll(trace: &RolloutTrace, mask: &[usize]) -> Result<(f64, usize)> {
    if mask.len() != trace.steps.len() {
        return Err(Error::Shape(format!(
            "rollout `{}` has {} steps but mask has {} entries",
            trace.rollout_id,
            trace.steps.len(),
            mask.len()
        )));
    }
    let mut terms = Vec::new();
    for (step, &m) in trace.steps.iter().zip(mask) {
        if m == 0 {
            continue;
        }
        if m > step.token_count {
            return Err(Error::Shape(format!(
                "rollout `{}` step {}: mask {m} exceeds token_count {}",
                trace.rollout_id, step.index, step.token_count
            )));
        }
        let lps = step.token_logprobs.as_ref().ok_or_else(|| Error::MissingLogprobs {
            rollout_id: trace.rollout_id.clone(),
            step: step.index,
        })?;
        terms.extend(lps[step.token_count - m..].iter().map(|lp| -lp));
    }
    let n = terms.len();
    Ok((terms.into_iter().sum(), n))
}

/// `exp` of the mean negative log-probability over the masked tokens.
pub fn rollout_perplexity(trace: &RolloutTrace, mask: &[usize]) -> Result<f64> {
    let (nll, n) = masked_nll(trace, mask)?;
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "rollout `{}` has no masked tokens; perplexity is undefined",
            trace.rollout_id
        )));
    }
    Ok((nll / n as f64).exp())
}

/// Fraction of rollouts whose perplexity is strictly above `threshold`.
pub fn high_ppl_ratio(traces: &[&RolloutTrace], masks: &[&[usize]], threshold: f64) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("high-PPL ratio of an empty batch".into()));
    }
    if traces.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} traces but {} masks",
            traces.len(),
            masks.len()
        )));
    }
    let mut high = 0usize;
    for (t, m) in traces.iter().zip(masks) {
        if rollout_perplexity(t, m)? > threshold {
            high += 1;
        }
    }
    Ok(high as f64 / traces.len() as f64)
}

/// Token-weighted negative and positive advantage mass over all steps.
pub fn advantage_mass(assignments: &[AdvantageAssignment]) -> (f64, f64) {
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for (a, m) in assignments.iter().flat_map(AdvantageAssignment::steps) {
        let w = a * m as f64;
        if w < 0.0 {
            neg.push(-w);
        } else if w > 0.0 {
            pos.push(w);
        }
    }
    (stable_sum(neg), stable_sum(pos))
}

/// `Σ|A<0|·tokens / ΣA>0·tokens`, or `None` when there is no positive mass.
pub fn neg_pos_ratio(assignments: &[AdvantageAssignment]) -> Option<f64> {
    let (neg, pos) = advantage_mass(assignments);
    (pos > 0.0).then(|| neg / pos)
}

/// Aggregate telemetry for one batch of groups and the assignments that
/// were (or would be) applied to them.
pub fn batch_telemetry(
    training_step: u64,
    groups: &[RolloutGroup],
    assignments: &[AdvantageAssignment],
    config: &CalibrationConfig,
) -> Result<TelemetryRecord> {
    check_aligned(groups, assignments)?;
    let mut traces = Vec::new();
    let mut masks = Vec::new();
    for (g, a) in groups.iter().zip(assignments) {
        for (r, m) in g.rollouts.iter().zip(&a.mask_tokens) {
            traces.push(r);
            masks.push(m.as_slice());
        }
    }
    let mut nll = Vec::with_capacity(traces.len());
    let mut tokens = 0usize;
    for (t, m) in traces.iter().zip(&masks) {
        let (s, n) = masked_nll(t, m)?;
        nll.push(s);
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("batch has no masked tokens".into()));
    }
    let mean_token_nll = stable_sum(nll) / tokens as f64;
    let rewards: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.rollouts.iter().map(|r| final_reward(r, &g.reference_answer).r_final))
        .collect();
    let success_rate = (!rewards.is_empty()).then(|| stable_sum(rewards.clone()) / rewards.len() as f64);
    Ok(TelemetryRecord {
        training_step,
        mean_token_nll,
        perplexity: mean_token_nll.exp(),
        neg_pos_ratio: neg_pos_ratio(assignments),
        high_ppl_ratio: high_ppl_ratio(&traces, &masks, config.ppl_threshold)?,
        mispenalty_by_step: mispenalty_rate(groups, assignments, config)?,
        policy_entropy: None,
        success_rate,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Writes one CSV row per record with the columns of [`REPORT_COLUMNS`].
/// Undefined values are left empty.
pub fn emit_report(records: &[TelemetryRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REPORT_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.training_step.to_string(),
            r.mean_token_nll.to_string(),
            r.perplexity.to_string(),
            fmt_opt(r.neg_pos_ratio),
            r.high_ppl_ratio.to_string(),
            fmt_opt(r.policy_entropy),
            fmt_opt(r.success_rate),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a report written by [`emit_report`]. Mis-penalization rows are not
/// part of the report and come back empty.
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<TelemetryRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected report header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_err(path, e))?;
        let num = |col: usize| -> Result<f64> {
            row[col].parse().map_err(|e| Error::Parse {
                line,
                message: format!("column {}: {e}", REPORT_COLUMNS[col]),
            })
        };
        let opt = |col: usize| -> Result<Option<f64>> {
            if row[col].is_empty() {
                Ok(None)
            } else {
                num(col).map(Some)
            }
        };
        out.push(TelemetryRecord {
            training_step: row[0].parse().map_err(|e| Error::Parse {
                line,
                message: format!("column training_step: {e}"),
            })?,
            mean_token_nll: num(1)?,
            perplexity: num(2)?,
            neg_pos_ratio: opt(3)?,
            high_ppl_ratio: num(4)?,
            mispenalty_by_step: Vec::new(),
            policy_entropy: opt(5)?,
            success_rate: opt(6)?,
        });
    }
    Ok(out)
}

pub fn write_mispenalty_table(rows: &[MispenaltyRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["step_index", "proportion", "count"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([r.step_index.to_string(), r.proportion.to_string(), r.count.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
