//! Tabular softmax policy over a closed action set.
//!
//! A state is `(question, turn, last entity)`; the last entity is an index
//! into the question's candidate list. Actions are `Query(c)` for every
//! candidate, `Answer` (answer with the last entity) and `Garbage`.
//!
//! One extra scalar logit, shared by every state, drives the think-tag
//! tokens that open each step: a tag token comes out well formed with
//! probability `σ(θ_tag / T)` and garbled otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::SyntheticCorpus;

/// One policy-generated token that carries parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Choice { state: usize, action: usize },
    ThinkTag { garbled: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Query(usize),
    Answer,
    Garbage,
}

/// Initial logit offsets, standing in for what a pretrained agent already
/// does before any reinforcement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyPrior {
    /// Bonus on querying the entity retrieved last, when a document about
    /// it exists.
    pub follow: f64,
    /// Bonus on answering when no document about the last entity exists.
    pub final_answer: f64,
    /// Bonus on the garbage action, in every state.
    pub garbage: f64,
    /// Initial shared think-tag logit.
    pub think_tag: f64,
}

impl Default for PolicyPrior {
    fn default() -> Self {
        PolicyPrior {
            follow: 2.5,
            final_answer: 3.0,
            garbage: 1.0,
            think_tag: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    /// `n_states × n_actions` table followed by the think-tag logit.
    logits: Vec<f64>,
    n_questions: usize,
    turns: usize,
    candidates: usize,
    temperature: f64,
}

impl TabularPolicy {
    /// All-zero logits (uniform policy).
    pub fn uniform(n_questions: usize, turns: usize, candidates: usize, temperature: f64) -> Self {
        let n_states = n_questions * turns * candidates;
        TabularPolicy {
            logits: vec![0.0; n_states * (candidates + 2) + 1],
            n_questions,
            turns,
            candidates,
            temperature,
        }
    }

    /// Prior-shaped policy with `corpus.hops + 1 + extra_turns` turns: it
    /// follows the last entity while a document about it exists and answers
    /// once the links run out.
    pub fn with_prior(corpus: &SyntheticCorpus, extra_turns: usize, temperature: f64, prior: &PolicyPrior) -> Self {
        let turns = corpus.hops + 1 + extra_turns;
        let mut p = Self::uniform(
            corpus.questions.len(),
            turns,
            corpus.candidates_per_question(),
            temperature,
        );
        let tag = p.tag_index();
        p.logits[tag] = prior.think_tag;
        let answer = p.action_index(Action::Answer);
        let garbage = p.action_index(Action::Garbage);
        for (q, question) in corpus.questions.iter().enumerate() {
            for turn in 0..turns {
                for last in 0..p.candidates {
                    let s = p.state_index(q, turn, last);
                    let follow = p.action_index(Action::Query(last));
                    let dead_end = corpus.doc_about(question.candidates[last]).is_none();
                    let row = p.row_mut(s);
                    row[garbage] += prior.garbage;
                    if dead_end {
                        row[answer] += prior.final_answer;
                    } else {
                        row[follow] += prior.follow;
                    }
                }
            }
        }
        p
    }

    pub fn n_actions(&self) -> usize {
        self.candidates + 2
    }

    pub fn n_states(&self) -> usize {
        self.n_questions * self.turns * self.candidates
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn state_index(&self, question: usize, turn: usize, last: usize) -> usize {
        debug_assert!(question < self.n_questions && turn < self.turns && last < self.candidates);
        (question * self.turns + turn) * self.candidates + last
    }

    pub fn action_index(&self, action: Action) -> usize {
        match action {
            Action::Query(c) => c,
            Action::Answer => self.candidates,
            Action::Garbage => self.candidates + 1,
        }
    }

    pub fn action(&self, index: usize) -> Action {
        match index {
            i if i < self.candidates => Action::Query(i),
            i if i == self.candidates => Action::Answer,
            _ => Action::Garbage,
        }
    }

    fn tag_index(&self) -> usize {
        self.logits.len() - 1
    }

    pub fn think_tag_logit(&self) -> f64 {
        self.logits[self.tag_index()]
    }

    /// `(log p_ok, log p_garbled)` for one think-tag token.
    pub fn tag_log_probs(&self) -> (f64, f64) {
        let x = self.think_tag_logit() / self.temperature;
        // log σ(x) and log σ(−x) without overflow
        let softplus = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
        (-softplus(-x), -softplus(x))
    }

    /// Probability that one think-tag token is well formed.
    pub fn tag_prob(&self) -> f64 {
        self.tag_log_probs().0.exp()
    }

    /// Flat parameter vector: the `n_states × n_actions` table, row-major,
    /// then the think-tag logit.
    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let n = self.n_actions();
        &self.logits[state * n..(state + 1) * n]
    }

    fn row_mut(&mut self, state: usize) -> &mut [f64] {
        let n = self.n_actions();
        &mut self.logits[state * n..(state + 1) * n]
    }

    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        let scaled: Vec<f64> = self.row(state).iter().map(|l| l / self.temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        scaled.into_iter().map(|x| x - lse).collect()
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        self.log_probs(state).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        self.log_probs(state)[action]
    }

    pub fn token_log_prob(&self, token: Token) -> f64 {
        match token {
            Token::Choice { state, action } => self.log_prob(state, action),
            Token::ThinkTag { garbled: false } => self.tag_log_probs().0,
            Token::ThinkTag { garbled: true } => self.tag_log_probs().1,
        }
    }

    pub fn entropy(&self, state: usize) -> f64 {
        self.log_probs(state).into_iter().map(|lp| -lp.exp() * lp).sum()
    }

    pub fn sample<R: Rng>(&self, state: usize, rng: &mut R) -> usize {
        let probs = self.probs(state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// `Σ A · log π(token)` over `(token, weight)` pairs.
    pub fn score_objective(&self, decisions: &[(Token, f64)]) -> f64 {
        decisions.iter().map(|&(t, w)| w * self.token_log_prob(t)).sum()
    }

    /// Gradient of [`score_objective`](Self::score_objective) with respect
    /// to the flat logit table.
    pub fn score_gradient(&self, decisions: &[(Token, f64)]) -> Vec<f64> {
        let n = self.n_actions();
        let t = self.temperature;
        let p_ok = self.tag_prob();
        let mut grad = vec![0.0; self.logits.len()];
        for &(token, w) in decisions {
            if w == 0.0 {
                continue;
            }
            match token {
                Token::Choice { state, action } => {
                    let probs = self.probs(state);
                    let g = &mut grad[state * n..(state + 1) * n];
                    for (b, p) in probs.into_iter().enumerate() {
                        let indicator = if b == action { 1.0 } else { 0.0 };
                        g[b] += w * (indicator - p) / t;
                    }
                }
                Token::ThinkTag { garbled } => {
                    let indicator = if garbled { 0.0 } else { 1.0 };
                    grad[self.tag_index()] += w * (indicator - p_ok) / t;
                }
            }
        }
        grad
    }

    /// One ascent step on the score objective.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        for (l, g) in self.logits.iter_mut().zip(grad) {
            *l += lr * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_policy(rng: &mut ChaCha8Rng) -> TabularPolicy {
        let mut p = TabularPolicy::uniform(2, 3, 4, rng.gen_range(0.5..2.0));
        for l in p.params_mut() {
            *l = rng.gen_range(-3.0..3.0);
        }
        p
    }

    #[test]
    fn probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_policy(&mut rng);
        for s in 0..p.n_states() {
            let sum: f64 = p.probs(s).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn action_index_round_trip() {
        let p = TabularPolicy::uniform(1, 2, 5, 1.0);
        for i in 0..p.n_actions() {
            assert_eq!(p.action_index(p.action(i)), i);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_policy(&mut rng);
            let decisions: Vec<(Token, f64)> = (0..6)
                .map(|i| {
                    let token = if i < 4 {
                        Token::Choice {
                            state: rng.gen_range(0..p.n_states()),
                            action: rng.gen_range(0..p.n_actions()),
                        }
                    } else {
                        Token::ThinkTag { garbled: rng.gen() }
                    };
                    (token, rng.gen_range(-2.0..2.0))
                })
                .collect();
            let analytic = p.score_gradient(&decisions);
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for (i, g) in analytic.iter().enumerate() {
                let mut plus = p.clone();
                plus.params_mut()[i] += h;
                let mut minus = p.clone();
                minus.params_mut()[i] -= h;
                let fd = (plus.score_objective(&decisions) - minus.score_objective(&decisions)) / (2.0 * h);
                worst = worst.max((fd - g).abs());
            }
            let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            assert!(worst <= 1e-5 * scale, "{worst} vs {scale}");
        }
    }

    #[test]
    fn positive_weight_raises_taken_action() {
        let mut p = TabularPolicy::uniform(1, 1, 3, 1.0);
        let before = p.probs(0)[1];
        let g = p.score_gradient(&[(Token::Choice { state: 0, action: 1 }, 0.5)]);
        p.apply_gradient(&g, 0.1);
        assert!(p.probs(0)[1] > before);
    }

    #[test]
    fn negative_weight_on_tag_lowers_tag_probability() {
        let mut p = TabularPolicy::uniform(1, 1, 3, 1.0);
        let before = p.tag_prob();
        let g = p.score_gradient(&[(Token::ThinkTag { garbled: false }, -1.0)]);
        p.apply_gradient(&g, 0.1);
        assert!(p.tag_prob() < before);
        assert_eq!(&g[..g.len() - 1], vec![0.0; g.len() - 1].as_slice());
    }

    #[test]
    fn tag_log_probs_are_stable() {
        let mut p = TabularPolicy::uniform(1, 1, 2, 1.0);
        for x in [-800.0, -3.0, 0.0, 3.0, 800.0] {
            *p.params_mut().last_mut().unwrap() = x;
            let (ok, bad) = p.tag_log_probs();
            assert!(ok.is_finite() && bad.is_finite());
            assert!((ok.exp() + bad.exp() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_shapes_initial_policy() {
        let c = super::super::corpus::generate_corpus(0, 2, 2, 3);
        let p = TabularPolicy::with_prior(&c, 0, 1.0, &PolicyPrior::default());
        assert_eq!(p.think_tag_logit(), PolicyPrior::default().think_tag);
        let s0 = p.state_index(0, 0, 0);
        let probs = p.probs(s0);
        let follow = probs[p.action_index(Action::Query(0))];
        assert!(probs.iter().all(|&x| x <= follow));
        // chain end e_2 has no outgoing document
        let last = p.state_index(0, 2, 2);
        let probs = p.probs(last);
        assert!(probs.iter().all(|&x| x <= probs[p.action_index(Action::Answer)]));
    }
}
