use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::env::TokenProfile;
use super::policy::PolicyPrior;
use crate::calibration::CalibrationConfig;
use crate::error::{Error, Result};

/// Which advantage pipeline drives the policy update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// Broadcast GRPO advantages only.
    Baseline,
    #[default]
    Calibadv,
}

impl FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Pipeline::Baseline),
            "calibadv" => Ok(Pipeline::Calibadv),
            other => Err(format!("unknown pipeline `{other}` (expected baseline or calibadv)")),
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::Baseline => "baseline",
            Pipeline::Calibadv => "calibadv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub group_size: usize,
    pub questions_per_batch: usize,
    /// Questions in the generated corpus.
    pub n_questions: usize,
    pub learning_rate: f64,
    pub updates: usize,
    pub hops: usize,
    /// Turns allowed beyond the `hops + 1` an ideal rollout needs.
    pub extra_turns: usize,
    pub distractors: usize,
    pub extra_docs_per_query: usize,
    pub temperature: f64,
    pub tokens: TokenProfile,
    pub prior: PolicyPrior,
    pub calibration: CalibrationConfig,
    pub pipeline: Pipeline,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 20_240_917,
            group_size: 5,
            questions_per_batch: 4,
            n_questions: 8,
            learning_rate: 0.5,
            updates: 400,
            hops: 2,
            extra_turns: 2,
            distractors: 3,
            extra_docs_per_query: 0,
            temperature: 1.0,
            tokens: TokenProfile::default(),
            prior: PolicyPrior::default(),
            calibration: CalibrationConfig::default(),
            pipeline: Pipeline::Calibadv,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("group_size", self.group_size),
            ("questions_per_batch", self.questions_per_batch),
            ("n_questions", self.n_questions),
            ("updates", self.updates),
            ("hops", self.hops),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if self.questions_per_batch > self.n_questions {
            return Err(Error::Config(format!(
                "questions_per_batch ({}) exceeds n_questions ({})",
                self.questions_per_batch, self.n_questions
            )));
        }
        if self.extra_docs_per_query > self.distractors {
            return Err(Error::Config("extra_docs_per_query exceeds distractors".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        let t = &self.tokens;
        let min_tokens = self.calibration.think_prefix_tokens + 1;
        for (name, n) in [
            ("query_tokens", t.query_tokens),
            ("answer_tokens", t.answer_tokens),
            ("garbage_tokens", t.garbage_tokens),
        ] {
            if n < min_tokens {
                return Err(Error::Config(format!(
                    "tokens.{name} must be at least think_prefix_tokens + 1 = {min_tokens}"
                )));
            }
        }
        for (name, lp) in [
            ("query_logprob", t.query_logprob),
            ("answer_logprob", t.answer_logprob),
            ("garbage_logprob", t.garbage_logprob),
        ] {
            if !(lp <= 0.0 && lp.is_finite()) {
                return Err(Error::Config(format!("tokens.{name} must be finite and <= 0")));
            }
        }
        let p = &self.prior;
        if ![p.follow, p.final_answer, p.garbage, p.think_tag]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::Config("prior offsets must be finite".into()));
        }
        self.calibration.validate()
    }
}
