//! End-to-end training loop: sample → reward → advantages → pipeline →
//! update, with telemetry recorded at every update.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Pipeline, SimConfig};
use super::corpus::generate_corpus_with;
use super::env::{batch_update, SampledGroup, SimEnv, GARBLED_TEXT};
use super::policy::{Action, TabularPolicy};
use crate::analysis::{advantage_mass, batch_telemetry, csv_err, emit_report, mispenalty_rate, TelemetryRecord};
use crate::annotated::write_annotated_file;
use crate::calibration::{baseline_group, calibrate_group, final_step_mass};
use crate::error::{Error, Result};
use crate::grpo::AdvantageAssignment;
use crate::rewards::{answer_f1, normalize_words};
use crate::trace::{write_trace_file, RolloutGroup};

/// Simulator-only quantities that need the known policy distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub training_step: u64,
    /// Mean `r_final` over the sampled batch.
    pub success_rate: f64,
    /// Exact expected reward of the current policy, averaged over questions.
    pub expected_reward: f64,
    /// Mean probability that a step on the correct hop chain degenerates
    /// into garbage.
    pub garbage_mass: f64,
    /// Probability of one well-formed think-tag token.
    pub think_tag_prob: f64,
    /// Mean entropy over the same states.
    pub policy_entropy: f64,
    /// Token-weighted advantage mass actually applied in this update.
    pub neg_mass: f64,
    pub pos_mass: f64,
    /// Groups whose applied final-step advantages carry both signs.
    pub both_sign_final_groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedBatch {
    pub training_step: u64,
    pub groups: Vec<(RolloutGroup, AdvantageAssignment)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: SimConfig,
    pub env: SimEnv,
    pub telemetry: Vec<TelemetryRecord>,
    pub metrics: Vec<StepMetrics>,
    pub policy: TabularPolicy,
    pub archive: Vec<ArchivedBatch>,
}

impl ExperimentOutcome {
    /// `Σ|A⁻|·tokens / ΣA⁺·tokens` over the whole run.
    pub fn cumulative_neg_pos_ratio(&self) -> Option<f64> {
        let neg: f64 = self.metrics.iter().map(|m| m.neg_mass).sum();
        let pos: f64 = self.metrics.iter().map(|m| m.pos_mass).sum();
        (pos > 0.0).then(|| neg / pos)
    }

    pub fn final_expected_reward(&self) -> f64 {
        expected_reward(&self.policy, &self.env)
    }

    pub fn final_garbage_mass(&self) -> f64 {
        chain_state_stats(&self.policy, &self.env).0
    }
}

/// Probability that a step's think-tag prefix comes out well formed.
fn prefix_ok_prob(policy: &TabularPolicy, env: &SimEnv) -> f64 {
    if env.prefix_supplied {
        1.0
    } else {
        policy.tag_prob().powi(env.think_prefix_tokens as i32)
    }
}

/// Mean probability that a step degenerates into garbage (garbled prefix
/// or the garbage action), and mean action entropy, over the on-chain
/// states `(q, t, e_t)` for `t ≤ hops`.
pub fn chain_state_stats(policy: &TabularPolicy, env: &SimEnv) -> (f64, f64) {
    let garbage = policy.action_index(Action::Garbage);
    let ok = prefix_ok_prob(policy, env);
    let mut mass = 0.0;
    let mut entropy = 0.0;
    let mut n = 0usize;
    for (qi, q) in env.corpus.questions.iter().enumerate() {
        for (t, &e) in q.chain.iter().enumerate() {
            let s = policy.state_index(qi, t, q.candidate_index(e).expect("chain entity is a candidate"));
            mass += 1.0 - ok * (1.0 - policy.probs(s)[garbage]);
            entropy += policy.entropy(s);
            n += 1;
        }
    }
    (mass / n as f64, entropy / n as f64)
}

/// Exact expected `r_final` under the policy, averaged over questions.
/// Extra retrieved distractors never change the state, so backward
/// induction over `(turn, last entity)` is exact.
pub fn expected_reward(policy: &TabularPolicy, env: &SimEnv) -> f64 {
    let corpus = &env.corpus;
    let ok = prefix_ok_prob(policy, env);
    let turns = policy.turns();
    let n_cand = corpus.candidates_per_question();
    let mut sum = 0.0;
    for (qi, q) in corpus.questions.iter().enumerate() {
        let reference = normalize_words(&q.answer);
        let scores: Vec<f64> = q
            .candidates
            .iter()
            .map(|&e| answer_f1(&normalize_words(corpus.entity_name(e)), &reference))
            .collect();
        let garbled = answer_f1(&normalize_words(GARBLED_TEXT), &reference);
        let next: Vec<usize> = (0..n_cand)
            .map(|c| {
                corpus
                    .doc_about(q.candidates[c])
                    .and_then(|f| q.candidate_index(f.object))
                    .unwrap_or(usize::MAX)
            })
            .collect();
        // value after the last turn: no answer given
        let mut later = vec![0.0; n_cand];
        for turn in (0..turns).rev() {
            let final_turn = turn + 1 == turns;
            let mut here = vec![0.0; n_cand];
            for (last, v) in here.iter_mut().enumerate() {
                let garbage_value = if final_turn { garbled } else { later[last] };
                let s = policy.state_index(qi, turn, last);
                let mut chosen = 0.0;
                for (a, p) in policy.probs(s).into_iter().enumerate() {
                    chosen += p * match policy.action(a) {
                        Action::Answer => scores[last],
                        Action::Garbage => garbage_value,
                        Action::Query(_) if final_turn => 0.0,
                        Action::Query(c) => later[if next[c] == usize::MAX { last } else { next[c] }],
                    };
                }
                *v = (1.0 - ok) * garbage_value + ok * chosen;
            }
            later = here;
        }
        sum += later[0];
    }
    sum / corpus.questions.len() as f64
}

pub fn run_experiment(config: &SimConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let corpus = generate_corpus_with(&mut rng, config.n_questions, config.hops, config.distractors);
    let cal = &config.calibration;
    let env = SimEnv {
        corpus,
        tokens: config.tokens,
        extra_docs_per_query: config.extra_docs_per_query,
        think_prefix_tokens: cal.think_prefix_tokens,
        prefix_supplied: config.pipeline == Pipeline::Calibadv && cal.enable_decouple_think,
    };
    let mut policy = TabularPolicy::with_prior(&env.corpus, config.extra_turns, config.temperature, &config.prior);

    let mut telemetry = Vec::with_capacity(config.updates);
    let mut metrics = Vec::with_capacity(config.updates);
    let mut archive = Vec::with_capacity(config.updates);
    for step in 0..config.updates {
        let training_step = step as u64;
        let picked = index::sample(&mut rng, config.n_questions, config.questions_per_batch).into_vec();
        let sampled: Vec<SampledGroup> = picked
            .into_iter()
            .map(|q| env.sample_group(&policy, q, config.group_size, &mut rng))
            .collect();
        let groups: Vec<RolloutGroup> = sampled.iter().map(|s| s.group.clone()).collect();

        let mut base = Vec::with_capacity(groups.len());
        let mut applied = Vec::with_capacity(groups.len());
        for g in &groups {
            let b = baseline_group(g, cal)?;
            let a = match config.pipeline {
                Pipeline::Baseline => b.assignment.clone(),
                Pipeline::Calibadv => calibrate_group(g, cal)?.assignment,
            };
            base.push(b.assignment);
            applied.push(a);
        }

        let (garbage_mass, entropy) = chain_state_stats(&policy, &env);
        let mut record = batch_telemetry(training_step, &groups, &applied, cal)?;
        record.mispenalty_by_step = mispenalty_rate(&groups, &base, cal)?;
        record.policy_entropy = Some(entropy);
        let (neg_mass, pos_mass) = advantage_mass(&applied);
        let mut both_sign = 0;
        for (g, a) in groups.iter().zip(&applied) {
            let (p, n) = final_step_mass(a, g)?;
            if p > 0.0 && n > 0.0 {
                both_sign += 1;
            }
        }
        metrics.push(StepMetrics {
            training_step,
            success_rate: record.success_rate.unwrap_or(0.0),
            expected_reward: expected_reward(&policy, &env),
            garbage_mass,
            think_tag_prob: policy.tag_prob(),
            policy_entropy: entropy,
            neg_mass,
            pos_mass,
            both_sign_final_groups: both_sign,
        });
        telemetry.push(record);

        let batch: Vec<(&SampledGroup, &AdvantageAssignment)> = sampled.iter().zip(&applied).collect();
        batch_update(&mut policy, &batch, config.learning_rate)?;
        archive.push(ArchivedBatch {
            training_step,
            groups: groups.into_iter().zip(applied).collect(),
        });
    }
    Ok(ExperimentOutcome {
        config: config.clone(),
        env,
        telemetry,
        metrics,
        policy,
        archive,
    })
}

pub fn write_metrics(metrics: &[StepMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for m in metrics {
        w.serialize(m).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct PolicySummary<'a> {
    pipeline: String,
    seed: u64,
    updates: usize,
    expected_reward: f64,
    garbage_mass: f64,
    think_tag_prob: f64,
    policy_entropy: f64,
    cumulative_neg_pos_ratio: Option<f64>,
    questions: Vec<QuestionSummary<'a>>,
}

#[derive(Debug, Serialize)]
struct QuestionSummary<'a> {
    question_id: &'a str,
    answer: &'a str,
    /// Probability of the correct action at each on-chain state.
    chain_action_probs: Vec<f64>,
    garbage_probs: Vec<f64>,
}

fn policy_summary(outcome: &ExperimentOutcome) -> PolicySummary<'_> {
    let policy = &outcome.policy;
    let (garbage_mass, policy_entropy) = chain_state_stats(policy, &outcome.env);
    let garbage = policy.action_index(Action::Garbage);
    let hops = outcome.env.corpus.hops;
    let questions = outcome
        .env
        .corpus
        .questions
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut chain_action_probs = Vec::new();
            let mut garbage_probs = Vec::new();
            for (t, &e) in q.chain.iter().enumerate() {
                let last = q.candidate_index(e).expect("chain entity is a candidate");
                let s = policy.state_index(qi, t, last);
                let good = if t == hops { Action::Answer } else { Action::Query(last) };
                let probs = policy.probs(s);
                chain_action_probs.push(probs[policy.action_index(good)]);
                garbage_probs.push(probs[garbage]);
            }
            QuestionSummary {
                question_id: &q.id,
                answer: &q.answer,
                chain_action_probs,
                garbage_probs,
            }
        })
        .collect();
    PolicySummary {
        pipeline: outcome.config.pipeline.to_string(),
        seed: outcome.config.seed,
        updates: outcome.config.updates,
        expected_reward: outcome.final_expected_reward(),
        garbage_mass,
        think_tag_prob: policy.tag_prob(),
        policy_entropy,
        cumulative_neg_pos_ratio: outcome.cumulative_neg_pos_ratio(),
        questions,
    }
}

/// Writes `telemetry.csv`, `sim_metrics.csv`, `traces.jsonl`,
/// `assignments.jsonl` and `policy_summary.json` into `dir`, creating it
/// when missing.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    emit_report(&outcome.telemetry, dir.join("telemetry.csv"))?;
    write_metrics(&outcome.metrics, dir.join("sim_metrics.csv"))?;
    let groups: Vec<RolloutGroup> = outcome
        .archive
        .iter()
        .flat_map(|b| b.groups.iter().map(|(g, _)| g.clone()))
        .collect();
    write_trace_file(&groups, dir.join("traces.jsonl"))?;
    let annotated: Vec<(RolloutGroup, AdvantageAssignment)> =
        outcome.archive.iter().flat_map(|b| b.groups.iter().cloned()).collect();
    write_annotated_file(&annotated, dir.join("assignments.jsonl"))?;
    let summary = serde_json::to_string_pretty(&policy_summary(outcome)).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("policy_summary.json");
    fs::write(&path, summary + "\n").map_err(|e| Error::io(&path, e))
}
