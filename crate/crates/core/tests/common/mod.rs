//! Random valid groups and small builders shared by the integration suites.
#![allow(dead_code)]

use calibadv::{DocumentId, RolloutGroup, RolloutTrace, Step};
use rand::seq::SliceRandom;
use rand::Rng;

pub const WORDS: [&str; 12] = [
    "paris", "france", "the", "river", "seine", "an", "old", "bridge", "a", "tower", "north", "city",
];

const UNICODE_BITS: [&str; 8] = [
    "é",
    "名字",
    "Ωmega",
    "🙂",
    "naïve",
    "\"quoted\"",
    "tab\tin",
    "back\\slash",
];

pub fn phrase<R: Rng>(rng: &mut R, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn text<R: Rng>(rng: &mut R, unicode: bool) -> String {
    let mut s = phrase(rng, 4);
    if unicode && rng.gen_bool(0.5) {
        s.push(' ');
        s.push_str(UNICODE_BITS.choose(rng).unwrap());
    }
    s
}

/// Options for [`random_group`].
#[derive(Debug, Clone, Copy)]
pub struct GroupShape {
    pub min_rollouts: usize,
    pub max_rollouts: usize,
    pub max_intermediate: usize,
    /// Size of the per-group document pool.
    pub doc_pool: usize,
    pub logprobs: bool,
    pub unicode: bool,
    /// Probability that a rollout ends in a final answer.
    pub final_prob: f64,
}

impl Default for GroupShape {
    fn default() -> Self {
        GroupShape {
            min_rollouts: 2,
            max_rollouts: 6,
            max_intermediate: 4,
            doc_pool: 6,
            logprobs: false,
            unicode: false,
            final_prob: 0.85,
        }
    }
}

pub fn random_step<R: Rng>(rng: &mut R, index: usize, shape: &GroupShape, qid: &str) -> Step {
    let docs: Vec<DocumentId> = (0..rng.gen_range(0..=3))
        .map(|_| DocumentId::new(format!("{qid}-d{}", rng.gen_range(0..shape.doc_pool))))
        .collect();
    let mut step = Step::intermediate(index, text(rng, shape.unicode), docs, rng.gen_range(1..=12));
    if shape.logprobs {
        step.token_logprobs = Some((0..step.token_count).map(|_| -rng.gen_range(0.0..6.0)).collect());
    }
    step.prefix_supplied = rng.gen_bool(0.5);
    step
}

pub fn random_group<R: Rng>(rng: &mut R, id: usize, shape: &GroupShape) -> RolloutGroup {
    let qid = format!("q{id}");
    let reference = phrase(rng, 3);
    let g = rng.gen_range(shape.min_rollouts..=shape.max_rollouts);
    let rollouts = (0..g)
        .map(|r| {
            let n = rng.gen_range(0..=shape.max_intermediate);
            let mut steps: Vec<Step> = (0..n).map(|i| random_step(rng, i, shape, &qid)).collect();
            let mut answer_text = String::new();
            if steps.is_empty() || rng.gen_bool(shape.final_prob) {
                let mut last = Step::final_answer(n, rng.gen_range(1..=12));
                if shape.logprobs {
                    last.token_logprobs = Some((0..last.token_count).map(|_| -rng.gen_range(0.0..6.0)).collect());
                }
                last.prefix_supplied = rng.gen_bool(0.5);
                steps.push(last);
                answer_text = match rng.gen_range(0..3) {
                    0 => reference.clone(),
                    1 => phrase(rng, 3),
                    _ => text(rng, shape.unicode),
                };
            }
            RolloutTrace {
                rollout_id: format!("{qid}-r{r}"),
                answer_text,
                raw_response: (shape.unicode && rng.gen_bool(0.3)).then(|| text(rng, true)),
                steps,
            }
        })
        .collect();
    RolloutGroup {
        question_id: qid,
        question_text: text(rng, shape.unicode),
        reference_answer: reference,
        rollouts,
    }
}

pub fn docs(ids: &[&str]) -> Vec<DocumentId> {
    ids.iter().map(|d| DocumentId::from(*d)).collect()
}

/// A rollout of intermediate steps (8 tokens each) and an optional final
/// answer step.
pub fn rollout(id: &str, answer: &str, queries: &[&[&str]], final_tokens: Option<usize>) -> RolloutTrace {
    let mut steps: Vec<Step> = queries
        .iter()
        .enumerate()
        .map(|(i, d)| Step::intermediate(i, format!("query {i}"), docs(d), 8))
        .collect();
    if let Some(t) = final_tokens {
        steps.push(Step::final_answer(steps.len(), t));
    }
    RolloutTrace {
        rollout_id: id.into(),
        answer_text: answer.into(),
        raw_response: None,
        steps,
    }
}

/// Brute-force mis-penalization table: walks every (group, rollout, step)
/// and returns `(step_index, numerator, denominator)` for indices with a
/// nonzero denominator, ascending.
pub fn mispenalty_oracle(
    groups: &[RolloutGroup],
    assignments: &[calibadv::AdvantageAssignment],
    threshold: f64,
) -> Vec<(usize, usize, usize)> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for (g, a) in groups.iter().zip(assignments) {
        let mut silver: Vec<&str> = Vec::new();
        for r in &g.rollouts {
            if calibadv::rewards::final_reward(r, &g.reference_answer).r_final >= threshold {
                for s in &r.steps {
                    for d in &s.retrieved_docs {
                        silver.push(d.as_str());
                    }
                }
            }
        }
        for (ri, r) in g.rollouts.iter().enumerate() {
            for (si, s) in r.steps.iter().enumerate() {
                let adv = a.per_rollout[ri][si];
                if s.is_final() || adv >= 0.0 || s.retrieved_docs.is_empty() {
                    continue;
                }
                if counts.len() <= s.index {
                    counts.resize(s.index + 1, (0, 0));
                }
                counts[s.index].1 += 1;
                if s.retrieved_docs.iter().all(|d| silver.contains(&d.as_str())) {
                    counts[s.index].0 += 1;
                }
            }
        }
    }
    counts
        .into_iter()
        .enumerate()
        .filter(|(_, (_, d))| *d > 0)
        .map(|(k, (n, d))| (k, n, d))
        .collect()
}
