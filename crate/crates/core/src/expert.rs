//! The contract every expert endpoint speaks, real or simulated.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling settings forwarded to an expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.7,
            top_p: 0.95,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} must lie in (0, 1]", self.top_p));
        }
        Ok(())
    }
}

/// One call to an expert.
///
/// `reference` and `dataset_tag` are only consumed by simulated experts;
/// remote adaptors ignore them.
#[derive(Debug, Clone)]
pub struct ExpertRequest<'a> {
    pub query_id: &'a str,
    pub prompt: &'a str,
    pub reference: Option<&'a str>,
    pub dataset_tag: Option<&'a str>,
    pub params: &'a GenerationParams,
    pub timeout: Duration,
}

/// What an expert sent back, with token accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertReply {
    pub response_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub elapsed_seconds: f64,
    /// Per-token log-probabilities of the generated sequence, when the
    /// endpoint exposes them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl ExpertReply {
    /// Mean negative log-likelihood over the generated tokens. `None` when
    /// the endpoint did not return log-probabilities.
    pub fn mean_nll(&self) -> Option<f64> {
        let lps = self.token_logprobs.as_ref()?;
        if lps.is_empty() {
            return Some(0.0);
        }
        Some(-lps.iter().sum::<f64>() / lps.len() as f64)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.elapsed_seconds.is_finite() && self.elapsed_seconds > 0.0) {
            return Err(format!(
                "elapsed_seconds {} must be positive",
                self.elapsed_seconds
            ));
        }
        if let Some(lps) = &self.token_logprobs {
            if lps.len() as u64 != self.output_tokens {
                return Err(format!(
                    "{} log-probabilities for {} output tokens",
                    lps.len(),
                    self.output_tokens
                ));
            }
            if let Some(bad) = lps.iter().find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
                return Err(format!("log-probability {bad} is not a finite value <= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptorError {
    #[error("expert {expert} timed out after {after:?}")]
    Timeout { expert: String, after: Duration },
    #[error("expert {expert} unreachable: {message}")]
    Transport { expert: String, message: String },
    #[error("expert {expert} sent a malformed reply: {message}")]
    Malformed { expert: String, message: String },
}

impl AdaptorError {
    pub fn expert(&self) -> &str {
        match self {
            Self::Timeout { expert, .. }
            | Self::Transport { expert, .. }
            | Self::Malformed { expert, .. } => expert,
        }
    }
}

/// A client able to run a prompt against one expert.
pub trait ExpertAdaptor: Send + Sync {
    fn name(&self) -> &str;

    fn execute(&self, request: &ExpertRequest<'_>) -> Result<ExpertReply, AdaptorError>;
}

/// A sorted, duplicate-free list of expert names.
///
/// Sorting fixes the class index of every expert, so "first maximum" in
/// index order is the lexicographic tie-break used everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ExpertSet(Vec<String>);

impl ExpertSet {
    pub fn new<I, S>(names: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err("expert set is empty".into());
        }
        if let Some(blank) = names.iter().find(|n| n.trim().is_empty()) {
            return Err(format!("blank expert name {blank:?}"));
        }
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("duplicate expert name {:?}", w[0]));
        }
        Ok(Self(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.0[index]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// Index of the highest score; ties go to the lexicographically smallest
    /// expert. NaN never wins.
    pub fn argmax(&self, scores: &[f64]) -> usize {
        argmax(scores)
    }
}

impl TryFrom<Vec<String>> for ExpertSet {
    type Error = String;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<ExpertSet> for Vec<String> {
    fn from(set: ExpertSet) -> Self {
        set.0
    }
}

impl fmt::Display for ExpertSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join(","))
    }
}

/// First index holding the maximum value.
pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || scores[best].is_nan() && !s.is_nan() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_set_sorts_and_rejects_duplicates() {
        let set = ExpertSet::new(["c", "a", "b"]).unwrap();
        assert_eq!(set.names(), ["a", "b", "c"]);
        assert_eq!(set.index_of("b"), Some(1));
        assert!(ExpertSet::new(["a", "a"])
            .unwrap_err()
            .contains("duplicate"));
        assert!(ExpertSet::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn argmax_breaks_ties_towards_lower_index() {
        assert_eq!(argmax(&[0.9, 0.9]), 0);
        assert_eq!(argmax(&[0.7, 0.9, 0.8]), 1);
        assert_eq!(argmax(&[f64::NAN, 0.1]), 1);
    }

    #[test]
    fn reply_nll_is_mean_of_negated_logprobs() {
        let reply = ExpertReply {
            response_text: "x".into(),
            input_tokens: 1,
            output_tokens: 2,
            elapsed_seconds: 0.5,
            token_logprobs: Some(vec![-1.0, -3.0]),
        };
        assert_eq!(reply.mean_nll(), Some(2.0));
        assert!(reply.validate().is_ok());

        let bad = ExpertReply {
            token_logprobs: Some(vec![0.5, -1.0]),
            ..reply.clone()
        };
        assert!(bad.validate().is_err());
        let miscounted = ExpertReply {
            token_logprobs: Some(vec![-1.0]),
            ..reply
        };
        assert!(miscounted.validate().is_err());
    }

    #[test]
    fn generation_defaults() {
        let p = GenerationParams::default();
        assert_eq!((p.max_tokens, p.temperature, p.top_p), (512, 0.7, 0.95));
        assert!(p.validate().is_ok());
        assert!(GenerationParams { top_p: 1.5, ..p }.validate().is_err());
    }
}
