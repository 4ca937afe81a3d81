//! Rollout sampling against the synthetic corpus and the score-function
//! policy update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::SyntheticCorpus;
use super::policy::{Action, TabularPolicy, Token};
use crate::error::{Error, Result};
use crate::grpo::AdvantageAssignment;
use crate::trace::{DocumentId, RolloutGroup, RolloutTrace, Step};

/// Stand-in text for degenerate output.
pub const GARBLED_TEXT: &str = "\u{fffd}\u{fffd} \u{fffd}\u{fffd}\u{fffd}";

/// Synthetic token counts and per-token log-probabilities by action kind.
///
/// A step's tokens are laid out as the think-tag prefix, then one choice
/// token carrying `log π(a|s)`, then filler tokens at the profile value.
/// A step whose prefix comes out garbled has no choice token: everything
/// after the prefix is garbage filler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenProfile {
    pub query_tokens: usize,
    pub answer_tokens: usize,
    pub garbage_tokens: usize,
    pub query_logprob: f64,
    pub answer_logprob: f64,
    pub garbage_logprob: f64,
}

impl Default for TokenProfile {
    fn default() -> Self {
        TokenProfile {
            query_tokens: 8,
            answer_tokens: 6,
            garbage_tokens: 12,
            query_logprob: -0.1,
            answer_logprob: -0.1,
            garbage_logprob: -4.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEnv {
    pub corpus: SyntheticCorpus,
    pub tokens: TokenProfile,
    /// Distractor documents returned alongside the queried entity's document.
    pub extra_docs_per_query: usize,
    pub think_prefix_tokens: usize,
    /// The harness writes the think tag instead of the policy.
    pub prefix_supplied: bool,
}

/// The parameter-bearing tokens behind one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepDecision {
    pub state: usize,
    /// Length of the think-tag prefix, supplied or generated.
    pub prefix_tokens: usize,
    /// Outcome of each policy-generated think-tag token (`true` = garbled);
    /// empty when the prefix is supplied.
    pub tags: Vec<bool>,
    /// The table action, absent when the prefix came out garbled.
    pub action: Option<usize>,
}

impl StepDecision {
    pub fn garbled_prefix(&self) -> bool {
        self.tags.iter().any(|&g| g)
    }
}

/// A sampled group together with the decisions behind every step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub group: RolloutGroup,
    pub decisions: Vec<Vec<StepDecision>>,
}

enum Outcome {
    Query(usize),
    Answer,
    Garbage,
}

impl SimEnv {
    /// The queried entity's document plus its fixed distractors: candidate
    /// `c` always brings back the distractor documents at positions
    /// `c + 1, c + 2, …` (cyclically) of the question's list.
    fn retrieve(&self, question: usize, candidate: usize) -> Vec<DocumentId> {
        let q = &self.corpus.questions[question];
        let mut docs: Vec<DocumentId> = self
            .corpus
            .doc_about(q.candidates[candidate])
            .map(|f| f.doc.clone())
            .into_iter()
            .collect();
        let n = q.distractor_docs.len();
        let mut extra = 0;
        for i in 0..n {
            if extra == self.extra_docs_per_query {
                break;
            }
            let doc = &self.corpus.facts[q.distractor_docs[(candidate + 1 + i) % n]].doc;
            if !docs.contains(doc) {
                docs.push(doc.clone());
                extra += 1;
            }
        }
        docs
    }

    pub fn sample_group<R: Rng>(
        &self,
        policy: &TabularPolicy,
        question: usize,
        group_size: usize,
        rng: &mut R,
    ) -> SampledGroup {
        let q = &self.corpus.questions[question];
        let (tag_ok, tag_bad) = policy.tag_log_probs();
        let p_ok = tag_ok.exp();
        let mut rollouts = Vec::with_capacity(group_size);
        let mut decisions = Vec::with_capacity(group_size);
        for g in 0..group_size {
            let mut steps = Vec::new();
            let mut taken = Vec::new();
            let mut answer_text = String::new();
            let mut last = 0;
            for turn in 0..policy.turns() {
                let s = policy.state_index(question, turn, last);
                let mut lps = Vec::new();
                let mut tags = Vec::new();
                if self.prefix_supplied {
                    lps.resize(self.think_prefix_tokens, 0.0);
                } else {
                    for _ in 0..self.think_prefix_tokens {
                        let garbled = rng.gen::<f64>() >= p_ok;
                        lps.push(if garbled { tag_bad } else { tag_ok });
                        tags.push(garbled);
                    }
                }
                let decision = if tags.iter().any(|&b| b) {
                    StepDecision {
                        state: s,
                        prefix_tokens: self.think_prefix_tokens,
                        tags,
                        action: None,
                    }
                } else {
                    let a = policy.sample(s, rng);
                    lps.push(policy.log_prob(s, a));
                    StepDecision {
                        state: s,
                        prefix_tokens: self.think_prefix_tokens,
                        tags,
                        action: Some(a),
                    }
                };
                let outcome = match decision.action.map(|a| policy.action(a)) {
                    Some(Action::Query(c)) => Outcome::Query(c),
                    Some(Action::Answer) => Outcome::Answer,
                    Some(Action::Garbage) | None => Outcome::Garbage,
                };
                taken.push(decision);
                let final_turn = turn + 1 == policy.turns();
                let (mut step, filler, done) = match outcome {
                    Outcome::Query(c) => {
                        let entity = q.candidates[c];
                        let docs = self.retrieve(question, c);
                        if let Some(f) = self.corpus.doc_about(entity) {
                            last = q
                                .candidate_index(f.object)
                                .expect("linked entity belongs to the question");
                        }
                        let st =
                            Step::intermediate(turn, self.corpus.entity_name(entity), docs, self.tokens.query_tokens);
                        (st, self.tokens.query_logprob, false)
                    }
                    Outcome::Answer => {
                        answer_text = self.corpus.entity_name(q.candidates[last]).to_string();
                        (
                            Step::final_answer(turn, self.tokens.answer_tokens),
                            self.tokens.answer_logprob,
                            true,
                        )
                    }
                    Outcome::Garbage if final_turn => {
                        answer_text = GARBLED_TEXT.to_string();
                        (
                            Step::final_answer(turn, self.tokens.garbage_tokens),
                            self.tokens.garbage_logprob,
                            true,
                        )
                    }
                    Outcome::Garbage => {
                        let st = Step::intermediate(turn, GARBLED_TEXT, Vec::new(), self.tokens.garbage_tokens);
                        (st, self.tokens.garbage_logprob, false)
                    }
                };
                lps.resize(step.token_count, filler);
                step.token_logprobs = Some(lps);
                step.prefix_supplied = self.prefix_supplied;
                steps.push(step);
                if done {
                    break;
                }
            }
            rollouts.push(RolloutTrace {
                rollout_id: format!("{}-r{g}", q.id),
                answer_text,
                raw_response: None,
                steps,
            });
            decisions.push(taken);
        }
        SampledGroup {
            group: RolloutGroup {
                question_id: q.id.clone(),
                question_text: q.text.clone(),
                reference_answer: q.answer.clone(),
                rollouts,
            },
            decisions,
        }
    }
}

/// `(token, advantage)` for every parameter-bearing token inside the loss
/// mask. The mask covers the trailing `mask` tokens of a step, so token
/// position `j` of an `n`-token step counts iff `j ≥ n − mask`.
pub fn weighted_decisions(sampled: &SampledGroup, assignment: &AdvantageAssignment) -> Result<Vec<(Token, f64)>> {
    assignment.check_shape(&sampled.group)?;
    if sampled.decisions.len() != sampled.group.rollouts.len()
        || sampled
            .decisions
            .iter()
            .zip(&sampled.group.rollouts)
            .any(|(d, r)| d.len() != r.steps.len())
    {
        return Err(Error::Shape(format!(
            "decisions of group `{}` do not match its steps",
            sampled.group.question_id
        )));
    }
    let mut out = Vec::new();
    for (((taken, rollout), adv), mask) in sampled
        .decisions
        .iter()
        .zip(&sampled.group.rollouts)
        .zip(&assignment.per_rollout)
        .zip(&assignment.mask_tokens)
    {
        for (((d, step), &w), &m) in taken.iter().zip(&rollout.steps).zip(adv).zip(mask) {
            if w == 0.0 {
                continue;
            }
            let first = step.token_count - m;
            for (j, &garbled) in d.tags.iter().enumerate() {
                if j >= first {
                    out.push((Token::ThinkTag { garbled }, w));
                }
            }
            if let Some(action) = d.action {
                if d.prefix_tokens >= first {
                    out.push((Token::Choice { state: d.state, action }, w));
                }
            }
        }
    }
    Ok(out)
}

/// One ascent step on `(1/R) Σ A · log π(token)` over every rollout of the
/// batch (`R` rollouts in total), with all gradients taken at the
/// pre-update policy.
pub fn batch_update(
    policy: &mut TabularPolicy,
    batch: &[(&SampledGroup, &AdvantageAssignment)],
    lr: f64,
) -> Result<()> {
    let mut decisions = Vec::new();
    let mut rollouts = 0;
    for (g, a) in batch {
        decisions.extend(weighted_decisions(g, a)?);
        rollouts += g.group.rollouts.len();
    }
    if rollouts == 0 {
        return Ok(());
    }
    let grad = policy.score_gradient(&decisions);
    policy.apply_gradient(&grad, lr / rollouts as f64);
    Ok(())
}

pub fn policy_update(
    policy: &mut TabularPolicy,
    sampled: &SampledGroup,
    assignment: &AdvantageAssignment,
    lr: f64,
) -> Result<()> {
    batch_update(policy, &[(sampled, assignment)], lr)
}
