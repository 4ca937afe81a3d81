//! Seeded multi-hop corpus: each question is a chain of entities linked by
//! one document per hop, surrounded by distractor documents that never touch
//! any chain.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trace::DocumentId;

const FIRST_WORDS: [&str; 32] = [
    "amber", "ashen", "azure", "brisk", "cedar", "coral", "crimson", "dusky", "ember", "fallow", "frost", "gilded",
    "hollow", "ivory", "jade", "lunar", "maple", "misty", "north", "ochre", "pale", "quiet", "russet", "sable",
    "silver", "slate", "tawny", "umber", "velvet", "willow", "wren", "zephyr",
];

const SECOND_WORDS: [&str; 32] = [
    "anchor", "badger", "beacon", "bridge", "canyon", "castle", "comet", "falcon", "fjord", "garden", "harbor",
    "heron", "island", "lantern", "meadow", "mill", "orchard", "otter", "pass", "pine", "quarry", "raven", "reef",
    "ridge", "summit", "thicket", "tower", "valley", "vault", "warden", "wharf", "yard",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub doc: DocumentId,
    pub subject: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub text: String,
    /// Entity ids `e0 → e1 → … → e_h`.
    pub chain: Vec<usize>,
    pub answer: String,
    /// Entities the agent can name for this question: the chain first, then
    /// the distractor entities. Action and state layouts index into this list.
    pub candidates: Vec<usize>,
    /// Fact index for hop `k + 1` (subject `chain[k]`).
    pub chain_docs: Vec<usize>,
    pub distractor_docs: Vec<usize>,
}

impl Question {
    pub fn hops(&self) -> usize {
        self.chain.len() - 1
    }

    pub fn candidate_index(&self, entity: usize) -> Option<usize> {
        self.candidates.iter().position(|&e| e == entity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub entities: Vec<String>,
    pub facts: Vec<Fact>,
    pub questions: Vec<Question>,
    pub hops: usize,
    pub distractors: usize,
    by_subject: HashMap<usize, usize>,
}

impl SyntheticCorpus {
    pub fn entity_name(&self, entity: usize) -> &str {
        &self.entities[entity]
    }

    /// The unique document whose subject is `entity`, if any.
    pub fn doc_about(&self, entity: usize) -> Option<&Fact> {
        self.by_subject.get(&entity).map(|&i| &self.facts[i])
    }

    pub fn question(&self, id: &str) -> Option<(usize, &Question)> {
        self.questions.iter().enumerate().find(|(_, q)| q.id == id)
    }

    /// Candidates per question; identical for all questions.
    pub fn candidates_per_question(&self) -> usize {
        self.hops + 1 + self.distractors
    }
}

fn entity_names(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let mut pairs: Vec<(usize, usize)> = (0..FIRST_WORDS.len())
        .flat_map(|a| (0..SECOND_WORDS.len()).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(rng);
    (0..count)
        .map(|i| {
            let (a, b) = pairs[i % pairs.len()];
            let round = i / pairs.len();
            if round == 0 {
                format!("{} {}", FIRST_WORDS[a], SECOND_WORDS[b])
            } else {
                format!("{} {} {round}", FIRST_WORDS[a], SECOND_WORDS[b])
            }
        })
        .collect()
}

pub fn generate_corpus(seed: u64, n_questions: usize, hops: usize, distractors: usize) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_corpus_with(&mut rng, n_questions, hops, distractors)
}

/// Builds a corpus drawing all randomness from `rng`.
///
/// # Panics
/// If `hops` is zero.
pub fn generate_corpus_with(
    rng: &mut ChaCha8Rng,
    n_questions: usize,
    hops: usize,
    distractors: usize,
) -> SyntheticCorpus {
    assert!(hops >= 1, "a question needs at least one hop");
    let per_question = hops + 1 + distractors;
    let entities = entity_names(rng, n_questions * per_question);
    let mut facts = Vec::new();
    let mut questions = Vec::with_capacity(n_questions);
    for q in 0..n_questions {
        let base = q * per_question;
        let chain: Vec<usize> = (base..=base + hops).collect();
        let noise: Vec<usize> = (base + hops + 1..base + per_question).collect();
        let id = format!("q{q:04}");
        let chain_docs = (0..hops)
            .map(|k| {
                facts.push(Fact {
                    doc: DocumentId::new(format!("{id}-hop{}", k + 1)),
                    subject: chain[k],
                    object: chain[k + 1],
                });
                facts.len() - 1
            })
            .collect();
        // distractor j links noise[j] to a random other distractor entity
        let distractor_docs = (0..distractors)
            .map(|j| {
                let object = if distractors > 1 {
                    let k = rng.gen_range(0..distractors - 1);
                    noise[if k >= j { k + 1 } else { k }]
                } else {
                    noise[j]
                };
                facts.push(Fact {
                    doc: DocumentId::new(format!("{id}-x{j}")),
                    subject: noise[j],
                    object,
                });
                facts.len() - 1
            })
            .collect();
        let mut candidates = chain.clone();
        candidates.extend(&noise);
        questions.push(Question {
            text: format!(
                "Starting from {}, which entity is reached after {hops} links?",
                entities[chain[0]]
            ),
            answer: entities[chain[hops]].clone(),
            id,
            chain,
            candidates,
            chain_docs,
            distractor_docs,
        });
    }
    let by_subject = facts.iter().enumerate().map(|(i, f)| (f.subject, i)).collect();
    SyntheticCorpus {
        entities,
        facts,
        questions,
        hops,
        distractors,
        by_subject,
    }
}
