//! Trace records annotated with per-step `advantage` and `mask_tokens`.
//!
//! The layout is the trace format with two extra step fields, so an
//! annotated file also parses as a plain trace file.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::AdvantageAssignment;
use crate::trace::{write_lines, DocumentId, RolloutGroup, RolloutTrace, Step, StepKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotatedStep {
    index: usize,
    kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_text: Option<String>,
    #[serde(default)]
    retrieved_docs: Vec<DocumentId>,
    token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    prefix_supplied: bool,
    advantage: f64,
    mask_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotatedRollout {
    rollout_id: String,
    #[serde(default)]
    answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_response: Option<String>,
    steps: Vec<AnnotatedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotatedRecord {
    question_id: String,
    #[serde(default)]
    question_text: String,
    reference_answer: String,
    rollouts: Vec<AnnotatedRollout>,
}

impl AnnotatedRecord {
    fn new(group: &RolloutGroup, assignment: &AdvantageAssignment) -> Result<Self> {
        group.validate()?;
        assignment.check_shape(group)?;
        let rollouts = group
            .rollouts
            .iter()
            .zip(assignment.per_rollout.iter().zip(&assignment.mask_tokens))
            .map(|(r, (adv, mask))| AnnotatedRollout {
                rollout_id: r.rollout_id.clone(),
                answer_text: r.answer_text.clone(),
                raw_response: r.raw_response.clone(),
                steps: r
                    .steps
                    .iter()
                    .zip(adv.iter().zip(mask))
                    .map(|(s, (&advantage, &mask_tokens))| AnnotatedStep {
                        index: s.index,
                        kind: s.kind,
                        query_text: s.query_text.clone(),
                        retrieved_docs: s.retrieved_docs.clone(),
                        token_count: s.token_count,
                        token_logprobs: s.token_logprobs.clone(),
                        prefix_supplied: s.prefix_supplied,
                        advantage,
                        mask_tokens,
                    })
                    .collect(),
            })
            .collect();
        Ok(AnnotatedRecord {
            question_id: group.question_id.clone(),
            question_text: group.question_text.clone(),
            reference_answer: group.reference_answer.clone(),
            rollouts,
        })
    }

    fn split(self) -> (RolloutGroup, AdvantageAssignment) {
        let mut per_rollout = Vec::with_capacity(self.rollouts.len());
        let mut mask_tokens = Vec::with_capacity(self.rollouts.len());
        let rollouts = self
            .rollouts
            .into_iter()
            .map(|r| {
                per_rollout.push(r.steps.iter().map(|s| s.advantage).collect());
                mask_tokens.push(r.steps.iter().map(|s| s.mask_tokens).collect());
                RolloutTrace {
                    rollout_id: r.rollout_id,
                    answer_text: r.answer_text,
                    raw_response: r.raw_response,
                    steps: r
                        .steps
                        .into_iter()
                        .map(|s| Step {
                            index: s.index,
                            kind: s.kind,
                            query_text: s.query_text,
                            retrieved_docs: s.retrieved_docs,
                            token_count: s.token_count,
                            token_logprobs: s.token_logprobs,
                            prefix_supplied: s.prefix_supplied,
                        })
                        .collect(),
                }
            })
            .collect();
        let group = RolloutGroup {
            question_id: self.question_id,
            question_text: self.question_text,
            reference_answer: self.reference_answer,
            rollouts,
        };
        (
            group,
            AdvantageAssignment {
                per_rollout,
                mask_tokens,
            },
        )
    }
}

pub fn annotated_line(group: &RolloutGroup, assignment: &AdvantageAssignment) -> Result<String> {
    let record = AnnotatedRecord::new(group, assignment)?;
    serde_json::to_string(&record).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_annotated_file(records: &[(RolloutGroup, AdvantageAssignment)], path: impl AsRef<Path>) -> Result<()> {
    let lines = records
        .iter()
        .map(|(g, a)| annotated_line(g, a))
        .collect::<Result<Vec<_>>>()?;
    write_lines(path.as_ref(), &lines)
}

pub fn parse_annotated_str(text: &str) -> Result<Vec<(RolloutGroup, AdvantageAssignment)>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    let parsed: Vec<Result<(RolloutGroup, AdvantageAssignment)>> = lines
        .par_iter()
        .map(|&(line, text)| {
            let record: AnnotatedRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let (group, assignment) = record.split();
            group
                .validate()
                .map_err(|source| Error::InvalidRecord { line, source })?;
            assignment.check_shape(&group).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            Ok((group, assignment))
        })
        .collect();
    parsed.into_iter().collect()
}

pub fn parse_annotated_file(path: impl AsRef<Path>) -> Result<Vec<(RolloutGroup, AdvantageAssignment)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotated_str(&text)
}
