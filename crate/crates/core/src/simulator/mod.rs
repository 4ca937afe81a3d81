//! Desk-scale deep-search environment with a tabular softmax policy.
//!
//! Questions are entity chains over a seeded corpus; the agent queries
//! entities, answers, or emits garbage. Every step opens with think-tag
//! tokens that the policy generates from one shared logit unless the
//! harness supplies them. Collapse shows up as garbage (garbled tags or the
//! garbage action) absorbing probability mass.

pub mod config;
pub mod corpus;
pub mod env;
pub mod experiment;
pub mod policy;

pub use config::{Pipeline, SimConfig};
pub use corpus::{generate_corpus, SyntheticCorpus};
pub use env::{batch_update, policy_update, weighted_decisions, SampledGroup, SimEnv, StepDecision, TokenProfile};
pub use experiment::{
    chain_state_stats, expected_reward, run_experiment, write_outputs, ArchivedBatch, ExperimentOutcome, StepMetrics,
};
pub use policy::{Action, PolicyPrior, TabularPolicy, Token};
