//! Gated answer reward: token-overlap F1 times a binary format check.

use std::collections::BTreeMap;

use crate::trace::RolloutTrace;

/// Multiset of normalized words.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordBag {
    counts: BTreeMap<String, usize>,
}

impl WordBag {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        for w in words {
            *counts.entry(w.into()).or_insert(0) += 1;
        }
        WordBag { counts }
    }

    /// Total number of words, counting repeats.
    pub fn len(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, word: &str) -> usize {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.counts.iter().map(|(w, c)| (w.as_str(), *c))
    }

    /// Size of the multiset intersection (sum of per-word minimum counts).
    pub fn overlap(&self, other: &WordBag) -> usize {
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.iter().map(|(w, c)| c.min(large.count(w))).sum()
    }
}

/// Answer normalization rules. The default follows the usual QA evaluation
/// convention: lowercase, drop ASCII punctuation, drop English articles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Normalizer {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub remove_articles: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            lowercase: true,
            strip_punctuation: true,
            remove_articles: true,
        }
    }
}

impl Normalizer {
    pub fn normalize(&self, text: &str) -> WordBag {
        let lowered;
        let text = if self.lowercase {
            lowered = text.to_lowercase();
            lowered.as_str()
        } else {
            text
        };
        let stripped: String = if self.strip_punctuation {
            text.chars().filter(|c| !c.is_ascii_punctuation()).collect()
        } else {
            text.to_string()
        };
        WordBag::from_words(
            stripped
                .split_whitespace()
                .filter(|w| !(self.remove_articles && matches!(*w, "a" | "an" | "the"))),
        )
    }
}

pub fn normalize_words(text: &str) -> WordBag {
    Normalizer::default().normalize(text)
}

/// Token-overlap F1: `2·IN / (PN + RN)`, zero when either the overlap or
/// both bags are empty.
pub fn answer_f1(predicted: &WordBag, reference: &WordBag) -> f64 {
    let total = predicted.len() + reference.len();
    let overlap = predicted.overlap(reference);
    if total == 0 || overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    Search,
    Information,
    Answer,
}

impl Tag {
    const ALL: [(Tag, &'static str); 4] = [
        (Tag::Think, "think"),
        (Tag::Search, "search"),
        (Tag::Information, "information"),
        (Tag::Answer, "answer"),
    ];
}

enum Token<'a> {
    Open(Tag),
    Close(Tag),
    Text(&'a str),
}

fn match_tag(rest: &str) -> Option<(Token<'static>, usize)> {
    for (tag, name) in Tag::ALL {
        let open = format!("<{name}>");
        if rest.starts_with(&open) {
            return Some((Token::Open(tag), open.len()));
        }
        let close = format!("</{name}>");
        if rest.starts_with(&close) {
            return Some((Token::Close(tag), close.len()));
        }
    }
    None
}

fn tokenize(s: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while i < s.len() {
        if s.as_bytes()[i] == b'<' {
            if let Some((tok, len)) = match_tag(&s[i..]) {
                if text_start < i {
                    tokens.push(Token::Text(&s[text_start..i]));
                }
                tokens.push(tok);
                i += len;
                text_start = i;
                continue;
            }
        }
        i += 1;
    }
    if text_start < s.len() {
        tokens.push(Token::Text(&s[text_start..]));
    }
    tokens
}

/// Flattens a response into its top-level tagged blocks, or `None` when any
/// block is unclosed, nested, interleaved, or text appears outside a block.
fn blocks(s: &str) -> Option<Vec<Tag>> {
    let mut out = Vec::new();
    let mut open: Option<Tag> = None;
    for tok in tokenize(s) {
        match (tok, open) {
            (Token::Text(t), None) if !t.trim().is_empty() => return None,
            (Token::Text(_), _) => {}
            (Token::Open(tag), None) => open = Some(tag),
            (Token::Close(tag), Some(cur)) if tag == cur => {
                out.push(tag);
                open = None;
            }
            _ => return None,
        }
    }
    open.is_none().then_some(out)
}

/// Returns 1 when the response is a sequence of turns
/// `think search [information]` ending in a single `think answer` turn.
pub fn check_format(raw_response: &str) -> u8 {
    let Some(blocks) = blocks(raw_response) else {
        return 0;
    };
    let mut i = 0;
    loop {
        if blocks.get(i) != Some(&Tag::Think) {
            return 0;
        }
        match blocks.get(i + 1) {
            Some(Tag::Answer) => return u8::from(i + 2 == blocks.len()),
            Some(Tag::Search) => {
                i += 2;
                if blocks.get(i) == Some(&Tag::Information) {
                    i += 1;
                }
            }
            _ => return 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub r_answer: f64,
    pub r_format: f64,
    pub r_final: f64,
}

impl RewardBreakdown {
    pub fn new(r_answer: f64, r_format: f64) -> Self {
        RewardBreakdown {
            r_answer,
            r_format,
            r_final: r_answer * r_format,
        }
    }
}

/// Reward of one rollout. Without a raw response, format validity is
/// inferred from whether the rollout ended in a final answer step.
pub fn final_reward(trace: &RolloutTrace, reference_answer: &str) -> RewardBreakdown {
    final_reward_with(&Normalizer::default(), trace, reference_answer)
}

pub fn final_reward_with(normalizer: &Normalizer, trace: &RolloutTrace, reference_answer: &str) -> RewardBreakdown {
    let r_answer = answer_f1(
        &normalizer.normalize(&trace.answer_text),
        &normalizer.normalize(reference_answer),
    );
    let r_format = match &trace.raw_response {
        Some(raw) => check_format(raw),
        None => u8::from(trace.has_final_answer()),
    };
    RewardBreakdown::new(r_answer, f64::from(r_format))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Step;

    fn bag(words: &[(&str, usize)]) -> WordBag {
        WordBag::from_words(words.iter().flat_map(|(w, c)| std::iter::repeat_n(*w, *c)))
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_words("The Beatles!"), bag(&[("beatles", 1)]));
        assert!(normalize_words("").is_empty());
        assert_eq!(normalize_words("New York, new york"), bag(&[("new", 2), ("york", 2)]));
        assert_eq!(normalize_words("an apple a day"), bag(&[("apple", 1), ("day", 1)]));
        assert_eq!(normalize_words("A."), WordBag::default());
    }

    #[test]
    fn normalizer_toggles() {
        let keep = Normalizer {
            lowercase: false,
            strip_punctuation: false,
            remove_articles: false,
        };
        assert_eq!(keep.normalize("The Beatles!"), bag(&[("The", 1), ("Beatles!", 1)]));
    }

    #[test]
    fn f1_examples() {
        let a = normalize_words("Paris France");
        assert_eq!(answer_f1(&a, &a), 1.0);
        let p = bag(&[("new", 1), ("york", 1), ("city", 1)]);
        let r = bag(&[("york", 1)]);
        assert_eq!(answer_f1(&p, &r), 0.5);
        assert_eq!(answer_f1(&bag(&[("x", 1)]), &bag(&[("y", 2)])), 0.0);
        assert_eq!(answer_f1(&WordBag::default(), &WordBag::default()), 0.0);
    }

    #[test]
    fn f1_uses_min_count_overlap() {
        let p = bag(&[("a1", 3)]);
        let r = bag(&[("a1", 1), ("b", 1)]);
        // IN = 1, PN = 3, RN = 2
        assert_eq!(answer_f1(&p, &r), 2.0 / 5.0);
    }

    #[test]
    fn format_examples() {
        assert_eq!(check_format("<think>x</think><answer>y</answer>"), 1);
        assert_eq!(check_format("<think>x<answer>y</answer>"), 0);
        assert_eq!(
            check_format("<think>x</think><answer>y</answer><think>z</think><answer>w</answer>"),
            0
        );
        assert_eq!(check_format("<think>x</think><answer>y</answer><answer>w</answer>"), 0);
    }

    #[test]
    fn format_multi_turn() {
        let ok = "<think>a</think>\n<search>q1</search>\n<information>d</information>\n\
                  <think>b</think><search>q2</search><information>e</information>\
                  <think>c</think> <answer>z</answer>\n";
        assert_eq!(check_format(ok), 1);
        // search without preceding think
        assert_eq!(check_format("<search>q</search><think>c</think><answer>z</answer>"), 0);
        // two searches in one turn
        assert_eq!(
            check_format("<think>a</think><search>q</search><search>q</search><think>c</think><answer>z</answer>"),
            0
        );
        // missing answer
        assert_eq!(check_format("<think>a</think><search>q</search>"), 0);
        // interleaved tags
        assert_eq!(
            check_format("<think>a<search>q</think></search><think>c</think><answer>z</answer>"),
            0
        );
        // stray text outside blocks
        assert_eq!(check_format("hello <think>c</think><answer>z</answer>"), 0);
        // unknown tags are ordinary text
        assert_eq!(check_format("<think>a <b>bold</b> 1<2</think><answer>z</answer>"), 1);
        assert_eq!(check_format(""), 0);
    }

    fn trace(answer: &str, raw: Option<&str>, final_step: bool) -> RolloutTrace {
        let steps = if final_step {
            vec![Step::final_answer(0, 3)]
        } else {
            vec![Step::intermediate(0, "q", vec![], 3)]
        };
        RolloutTrace {
            rollout_id: "r".into(),
            answer_text: answer.into(),
            raw_response: raw.map(str::to_string),
            steps,
        }
    }

    #[test]
    fn final_reward_gates_on_format() {
        // predicted 3 words, reference 2, overlap 2: F1 = 4/5
        let good = trace(
            "new york city",
            Some("<think>t</think><answer>new york city</answer>"),
            true,
        );
        let r = final_reward(&good, "New York");
        assert_eq!(r.r_answer, 0.8);
        assert_eq!(r.r_format, 1.0);
        assert_eq!(r.r_final, 0.8);

        let bad = trace("new york city", Some("<think>t<answer>new york city</answer>"), true);
        let r = final_reward(&bad, "New York");
        assert_eq!(r.r_answer, 0.8);
        assert_eq!(r.r_format, 0.0);
        assert_eq!(r.r_final, 0.0);

        let none = trace("", None, false);
        let r = final_reward(&none, "New York");
        assert_eq!(r.r_format, 0.0);
        assert_eq!(r.r_final, 0.0);

        let structural = trace("new york", None, true);
        assert_eq!(final_reward(&structural, "New York").r_final, 1.0);
    }
}
