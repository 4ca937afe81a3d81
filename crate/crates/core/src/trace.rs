//! Rollout data model and the line-delimited trace format.
//!
//! A trace file holds one [`RolloutGroup`] per line as a JSON object. Groups
//! are independent, so files can be streamed, split and concatenated freely.
//! Field order on write is fixed by the struct declarations below, which
//! makes serialization canonical.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};

/// Corpus-unique document key. Compared by exact string equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocumentId(String);

impl DocumentId {
    pub fn new(id: impl Into<String>) -> Self {
        DocumentId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DocumentId {
    fn from(s: &str) -> Self {
        DocumentId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Intermediate,
    FinalAnswer,
}

/// One agent turn.
///
/// `token_count` spans every token of the turn's response that sits inside
/// the loss window, including the opening think tag. When `prefix_supplied`
/// is set, that tag occupies the leading positions but was written by the
/// harness instead of being sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    #[serde(default)]
    pub retrieved_docs: Vec<DocumentId>,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub prefix_supplied: bool,
}

impl Step {
    pub fn intermediate(index: usize, query: impl Into<String>, docs: Vec<DocumentId>, token_count: usize) -> Self {
        Step {
            index,
            kind: StepKind::Intermediate,
            query_text: Some(query.into()),
            retrieved_docs: docs,
            token_count,
            token_logprobs: None,
            prefix_supplied: false,
        }
    }

    pub fn final_answer(index: usize, token_count: usize) -> Self {
        Step {
            index,
            kind: StepKind::FinalAnswer,
            query_text: None,
            retrieved_docs: Vec::new(),
            token_count,
            token_logprobs: None,
            prefix_supplied: false,
        }
    }

    pub fn is_final(&self) -> bool {
        self.kind == StepKind::FinalAnswer
    }

    fn validate(&self, rollout_id: &str, position: usize) -> std::result::Result<(), ValidationError> {
        let field = |name: &str| format!("steps[{position}].{name}");
        if self.index != position {
            return Err(ValidationError::rollout(
                rollout_id,
                field("index"),
                format!("expected {position}, found {}", self.index),
            ));
        }
        match self.kind {
            StepKind::FinalAnswer => {
                if !self.retrieved_docs.is_empty() {
                    return Err(ValidationError::rollout(
                        rollout_id,
                        field("retrieved_docs"),
                        "final_answer step must not retrieve documents",
                    ));
                }
                if self.query_text.is_some() {
                    return Err(ValidationError::rollout(
                        rollout_id,
                        field("query_text"),
                        "final_answer step must not carry a query",
                    ));
                }
            }
            StepKind::Intermediate => {
                if self.query_text.is_none() {
                    return Err(ValidationError::rollout(
                        rollout_id,
                        field("query_text"),
                        "intermediate step must carry a query",
                    ));
                }
            }
        }
        if let Some(doc) = self.retrieved_docs.iter().position(|d| d.as_str().is_empty()) {
            return Err(ValidationError::rollout(
                rollout_id,
                field(&format!("retrieved_docs[{doc}]")),
                "document id must be non-empty",
            ));
        }
        if let Some(lps) = &self.token_logprobs {
            if lps.len() != self.token_count {
                return Err(ValidationError::rollout(
                    rollout_id,
                    field("token_logprobs"),
                    format!("length {} differs from token_count {}", lps.len(), self.token_count),
                ));
            }
            if let Some(bad) = lps.iter().position(|lp| !lp.is_finite() || *lp > 0.0) {
                return Err(ValidationError::rollout(
                    rollout_id,
                    field(&format!("token_logprobs[{bad}]")),
                    format!("log-probability must be finite and <= 0, found {}", lps[bad]),
                ));
            }
        }
        Ok(())
    }
}

/// One multi-turn trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub rollout_id: String,
    #[serde(default)]
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    pub steps: Vec<Step>,
}

impl RolloutTrace {
    pub fn final_step(&self) -> Option<&Step> {
        self.steps.last().filter(|s| s.is_final())
    }

    pub fn has_final_answer(&self) -> bool {
        self.final_step().is_some()
    }

    pub fn validate(&self) -> std::result::Result<(), ValidationError> {
        let id = self.rollout_id.as_str();
        if self.steps.is_empty() {
            return Err(ValidationError::rollout(
                id,
                "steps",
                "rollout must have at least one step",
            ));
        }
        for (pos, step) in self.steps.iter().enumerate() {
            step.validate(id, pos)?;
        }
        let last = self.steps.len() - 1;
        if let Some(pos) = self.steps[..last].iter().position(Step::is_final) {
            return Err(ValidationError::rollout(
                id,
                format!("steps[{pos}].kind"),
                "final_answer step must be the last step",
            ));
        }
        if !self.answer_text.is_empty() && !self.steps[last].is_final() {
            return Err(ValidationError::rollout(
                id,
                "answer_text",
                "non-empty answer requires a final_answer step",
            ));
        }
        Ok(())
    }
}

/// G rollouts answering the same question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question_id: String,
    #[serde(default)]
    pub question_text: String,
    pub reference_answer: String,
    pub rollouts: Vec<RolloutTrace>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn validate(&self) -> std::result::Result<(), ValidationError> {
        if self.rollouts.len() < 2 {
            return Err(ValidationError::group(
                "rollouts",
                format!(
                    "question `{}` has {} rollout(s); a group needs at least 2",
                    self.question_id,
                    self.rollouts.len()
                ),
            ));
        }
        let mut seen = HashSet::with_capacity(self.rollouts.len());
        for rollout in &self.rollouts {
            if !seen.insert(rollout.rollout_id.as_str()) {
                return Err(ValidationError::rollout(
                    &rollout.rollout_id,
                    "rollout_id",
                    "duplicate rollout id within group",
                ));
            }
            rollout.validate()?;
        }
        Ok(())
    }
}

/// Parses one record line and validates it. `line_no` is 1-based and only
/// used for error reporting.
pub fn parse_group_line(line: &str, line_no: usize) -> Result<RolloutGroup> {
    let group: RolloutGroup = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    group
        .validate()
        .map_err(|source| Error::InvalidRecord { line: line_no, source })?;
    Ok(group)
}

/// Parses every record of an in-memory trace document. Blank lines are skipped.
pub fn parse_trace_str(text: &str) -> Result<Vec<RolloutGroup>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    let parsed: Vec<Result<RolloutGroup>> = lines
        .par_iter()
        .map(|&(line_no, line)| parse_group_line(line, line_no))
        .collect();
    parsed.into_iter().collect()
}

pub fn parse_trace_file(path: impl AsRef<Path>) -> Result<Vec<RolloutGroup>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_str(&text)
}

/// Serializes one group to its canonical single-line form.
pub fn group_to_line(group: &RolloutGroup) -> Result<String> {
    group.validate()?;
    serde_json::to_string(group).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Writes groups one per line. Every group is validated before the file is
/// touched, so an invalid input never leaves a partial file behind.
pub fn write_trace_file(groups: &[RolloutGroup], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let lines = groups.iter().map(group_to_line).collect::<Result<Vec<_>>>()?;
    write_lines(path, &lines)
}

pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
