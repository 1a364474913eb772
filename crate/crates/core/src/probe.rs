//! Large-digit addition prompts for a text-completion model and the
//! three-way classification of its answers.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_bigint::{BigInt, BigUint};
use serde::{Deserialize, Serialize};

use crate::taskgen::LargePair;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub text: String,
    pub a: String,
    pub b: String,
    pub truth: String,
}

impl Prompt {
    pub fn new(id: usize, a: &BigUint, b: &BigUint) -> Self {
        let (a_s, b_s) = (a.to_string(), b.to_string());
        Self { id, text: alloc::format!("What is {a_s} + {b_s}?"), truth: (a + b).to_string(), a: a_s, b: b_s }
    }

    /// Operands recovered from a prompt text.
    pub fn reparse(text: &str) -> Option<(BigUint, BigUint)> {
        let body = text.strip_prefix("What is ")?.strip_suffix('?')?;
        let (a, b) = body.split_once(" + ")?;
        let digits = |s: &str| !s.is_empty() && s.bytes().all(|c| c.is_ascii_digit());
        if !digits(a) || !digits(b) {
            return None;
        }
        Some((a.parse().ok()?, b.parse().ok()?))
    }

    /// `max(digits(a), digits(b))`.
    pub fn digit_bucket(&self) -> usize {
        self.a.len().max(self.b.len())
    }
}

pub fn render_prompts(pairs: &[LargePair]) -> Vec<Prompt> {
    pairs.iter().enumerate().map(|(i, p)| Prompt::new(i, &p.a, &p.b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub maximum_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub n_samples: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { maximum_tokens: 105, temperature: 0.1, top_p: 0.0, top_k: 0, n_samples: 10 }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.maximum_tokens == 0 {
            return Err("maximum_tokens must be at least 1".into());
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature must be non-negative".into());
        }
        if self.n_samples == 0 {
            return Err("n_samples must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    NonNumerical,
    NumericalIncorrect,
    Correct,
}

/// Version tag of the normalisation rules in [`normalize`].
pub const NORMALIZATION_VERSION: u32 = 1;

/// Trims whitespace, drops one trailing period and removes commas.
pub fn normalize(raw: &str) -> String {
    let t = raw.trim();
    let t = t.strip_suffix('.').unwrap_or(t);
    t.replace(',', "")
}

/// Integer value of a completion that is purely numeric after normalisation.
pub fn parse_numeric(raw: &str) -> Option<BigInt> {
    let n = normalize(raw);
    let digits = n.strip_prefix('-').unwrap_or(&n);
    if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    n.parse().ok()
}

pub fn classify_response(raw: &str, truth: &str) -> (Classification, Option<BigInt>) {
    match parse_numeric(raw) {
        None => (Classification::NonNumerical, None),
        Some(v) => {
            let correct = truth.parse::<BigInt>().is_ok_and(|t| t == v);
            (if correct { Classification::Correct } else { Classification::NumericalIncorrect }, Some(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Classified {
        classification: Classification,
        #[serde(with = "crate::decimal::option", default)]
        parsed_value: Option<BigInt>,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub prompt_id: usize,
    pub a: String,
    pub b: String,
    pub truth: String,
    pub raw_completion: Option<String>,
    #[serde(flatten)]
    pub outcome: Outcome,
}

impl ProbeResponse {
    pub fn classified(prompt: &Prompt, raw: String) -> Self {
        let (classification, parsed_value) = classify_response(&raw, &prompt.truth);
        Self {
            prompt_id: prompt.id,
            a: prompt.a.clone(),
            b: prompt.b.clone(),
            truth: prompt.truth.clone(),
            raw_completion: Some(raw),
            outcome: Outcome::Classified { classification, parsed_value },
        }
    }

    pub fn failed(prompt: &Prompt, error: String) -> Self {
        Self {
            prompt_id: prompt.id,
            a: prompt.a.clone(),
            b: prompt.b.clone(),
            truth: prompt.truth.clone(),
            raw_completion: None,
            outcome: Outcome::Failed { error },
        }
    }

    pub fn classification(&self) -> Option<Classification> {
        match self.outcome {
            Outcome::Classified { classification, .. } => Some(classification),
            Outcome::Failed { .. } => None,
        }
    }

    pub fn digit_bucket(&self) -> usize {
        self.a.len().max(self.b.len())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub non_numerical: usize,
    pub numerical_incorrect: usize,
    pub correct: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.non_numerical + self.numerical_incorrect + self.correct
    }

    fn add(&mut self, c: Classification) {
        match c {
            Classification::NonNumerical => self.non_numerical += 1,
            Classification::NumericalIncorrect => self.numerical_incorrect += 1,
            Classification::Correct => self.correct += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitRatios {
    pub digits: usize,
    pub counts: GroupCounts,
    pub correct: f64,
    pub numerical_incorrect: f64,
    pub non_numerical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub normalization_version: u32,
    pub responses: usize,
    pub failed: usize,
    pub counts: GroupCounts,
    pub by_digits: Vec<DigitRatios>,
}

pub fn summarize(responses: &[ProbeResponse]) -> ProbeSummary {
    let mut counts = GroupCounts::default();
    let mut buckets: BTreeMap<usize, GroupCounts> = BTreeMap::new();
    let mut failed = 0;
    for r in responses {
        match r.classification() {
            Some(c) => {
                counts.add(c);
                buckets.entry(r.digit_bucket()).or_default().add(c);
            }
            None => failed += 1,
        }
    }
    let by_digits = buckets
        .into_iter()
        .map(|(digits, c)| {
            let n = c.total() as f64;
            DigitRatios {
                digits,
                counts: c,
                correct: c.correct as f64 / n,
                numerical_incorrect: c.numerical_incorrect as f64 / n,
                non_numerical: c.non_numerical as f64 / n,
            }
        })
        .collect();
    ProbeSummary { normalization_version: NORMALIZATION_VERSION, responses: responses.len(), failed, counts, by_digits }
}

/// `(truth, prediction)` for every response with a numeric answer.
pub fn pred_vs_truth(responses: &[ProbeResponse]) -> Vec<(String, String)> {
    responses
        .iter()
        .filter_map(|r| match &r.outcome {
            Outcome::Classified { parsed_value: Some(v), .. } => Some((r.truth.clone(), v.to_string())),
            _ => None,
        })
        .collect()
}
