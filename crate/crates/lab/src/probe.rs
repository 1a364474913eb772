//! Completion-endpoint client, fixture replay and probe outputs.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use addlab_core::probe::{self, ProbeResponse, ProbeSummary, Prompt, SamplingParams};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsutil;

pub const ENDPOINT_ENV: &str = "ADDLAB_ENDPOINT";
pub const API_KEY_ENV: &str = "ADDLAB_API_KEY";
pub const RAW_FILE: &str = "raw_completions.jsonl";

/// One recorded completion; the replay fixture format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRecord {
    pub prompt_id: usize,
    pub raw_completion: String,
    /// Every returned sample, when recording all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestError {
    /// Worth retrying: network failures, 429 and 5xx.
    Transient(String),
    Fatal(String),
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RequestError::Transient(m) | RequestError::Fatal(m) => f.write_str(m),
        }
    }
}

pub trait Completer: Sync {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> std::result::Result<Vec<String>, RequestError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, initial_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    /// Wait before retry number `retry` (0-based): doubling, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.initial_delay.saturating_mul(factor).min(self.max_delay)
    }
}

pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut call: impl FnMut() -> std::result::Result<T, RequestError>,
) -> std::result::Result<T, String> {
    let mut retry = 0;
    loop {
        match call() {
            Ok(v) => return Ok(v),
            Err(RequestError::Fatal(m)) => return Err(m),
            Err(RequestError::Transient(m)) if retry >= policy.max_retries => {
                return Err(format!("gave up after {} attempts: {m}", retry + 1));
            }
            Err(RequestError::Transient(_)) => {
                sleep(policy.delay(retry));
                retry += 1;
            }
        }
    }
}

pub fn request_body(prompt: &str, params: &SamplingParams) -> serde_json::Value {
    serde_json::json!({
        "prompt": prompt,
        "maximum_tokens": params.maximum_tokens,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "top_k": params.top_k,
        "n": params.n_samples,
    })
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

/// Sample texts from a `{"choices": [{"text": ...}, ...]}` response body.
pub fn parse_completions(body: &str) -> std::result::Result<Vec<String>, String> {
    let parsed: CompletionBody = serde_json::from_str(body).map_err(|e| format!("unexpected response body: {e}"))?;
    if parsed.choices.is_empty() {
        return Err("response has no choices".into());
    }
    Ok(parsed.choices.into_iter().map(|c| c.text).collect())
}

pub struct HttpCompleter {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpCompleter {
    pub fn new(endpoint: String, api_key: Option<String>, timeout: Duration) -> Self {
        Self { endpoint, api_key, agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }

    /// Endpoint from the flag or `ADDLAB_ENDPOINT`, bearer token from
    /// `ADDLAB_API_KEY`.
    pub fn from_env(endpoint: Option<String>, timeout: Duration) -> std::result::Result<Self, String> {
        let endpoint = endpoint
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| format!("live mode needs a completion endpoint: pass --endpoint or set {ENDPOINT_ENV}"))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty());
        Ok(Self::new(endpoint, api_key, timeout))
    }
}

impl Completer for HttpCompleter {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> std::result::Result<Vec<String>, RequestError> {
        let mut req = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = request_body(prompt, params).to_string();
        match req.send_string(&body) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| RequestError::Transient(format!("reading response: {e}")))?;
                parse_completions(&text).map_err(RequestError::Fatal)
            }
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", detail.chars().take(200).collect::<String>());
                if code == 429 || code >= 500 {
                    Err(RequestError::Transient(msg))
                } else {
                    Err(RequestError::Fatal(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(RequestError::Transient(t.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Minimum spacing between request starts across all workers.
    pub min_interval: Duration,
    pub record_all_samples: bool,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self { concurrency: 4, retry: RetryPolicy::default(), min_interval: Duration::ZERO, record_all_samples: false }
    }
}

struct Pacer {
    next: Mutex<Instant>,
    interval: Duration,
}

impl Pacer {
    fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let slot = {
            let mut next = self.next.lock().unwrap();
            let slot = (*next).max(Instant::now());
            *next = slot + self.interval;
            slot
        };
        std::thread::sleep(slot.saturating_duration_since(Instant::now()));
    }
}

/// Queries every prompt with at most `opts.concurrency` requests in flight.
/// Each completion is appended to `raw_log` as it arrives, before any
/// classification. Exhausted retries yield a failed response.
pub fn probe_live(
    prompts: &[Prompt],
    completer: &dyn Completer,
    params: &SamplingParams,
    opts: &LiveOptions,
    raw_log: &Path,
) -> Result<Vec<ProbeResponse>> {
    let mut log = fs::File::create(raw_log).map_err(LabError::io(raw_log))?;
    let next = AtomicUsize::new(0);
    let pacer = Pacer { next: Mutex::new(Instant::now()), interval: opts.min_interval };
    let (tx, rx) = mpsc::channel::<(usize, std::result::Result<Vec<String>, String>)>();
    let mut outcomes: Vec<Option<std::result::Result<Vec<String>, String>>> = vec![None; prompts.len()];
    let mut log_error = None;
    std::thread::scope(|s| {
        for _ in 0..opts.concurrency.max(1).min(prompts.len().max(1)) {
            let tx = tx.clone();
            let (next, pacer) = (&next, &pacer);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    break;
                }
                let r = with_retry(&opts.retry, std::thread::sleep, || {
                    pacer.wait();
                    completer.complete(&prompts[i].text, params)
                });
                if tx.send((i, r)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut done = 0;
        for (i, r) in rx {
            if let Ok(samples) = &r {
                let rec = FixtureRecord {
                    prompt_id: prompts[i].id,
                    raw_completion: samples[0].clone(),
                    samples: opts.record_all_samples.then(|| samples.clone()),
                };
                let mut line = serde_json::to_vec(&rec).expect("serializable record");
                line.push(b'\n');
                if let Err(e) = log.write_all(&line).and_then(|_| log.flush()) {
                    log_error.get_or_insert(e);
                }
            }
            outcomes[i] = Some(r);
            done += 1;
            if done % 100 == 0 || done == prompts.len() {
                eprintln!("probe: {done}/{} responses", prompts.len());
            }
        }
    });
    if let Some(e) = log_error {
        return Err(LabError::Io { path: raw_log.to_path_buf(), source: e });
    }
    Ok(prompts
        .iter()
        .zip(outcomes)
        .map(|(p, r)| match r.expect("every prompt answered") {
            Ok(mut samples) => ProbeResponse::classified(p, samples.swap_remove(0)),
            Err(e) => ProbeResponse::failed(p, e),
        })
        .collect())
}

pub fn read_fixture(path: &Path) -> Result<Vec<FixtureRecord>> {
    fsutil::read_jsonl(path)
}

/// Classifies the first `limit` fixture records against `prompts`, in
/// fixture order. Unknown or repeated prompt ids are errors.
pub fn replay(prompts: &[Prompt], records: &[FixtureRecord], limit: usize) -> std::result::Result<Vec<ProbeResponse>, String> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .take(limit)
        .enumerate()
        .map(|(line, r)| {
            let prompt = prompts
                .get(r.prompt_id)
                .filter(|p| p.id == r.prompt_id)
                .ok_or_else(|| format!("record {}: prompt_id {} is not among the {} prompts", line + 1, r.prompt_id, prompts.len()))?;
            if !seen.insert(r.prompt_id) {
                return Err(format!("record {}: duplicate prompt_id {}", line + 1, r.prompt_id));
            }
            Ok(ProbeResponse::classified(prompt, r.raw_completion.clone()))
        })
        .collect()
}

#[derive(Serialize)]
struct RatioRow {
    digits: usize,
    n: usize,
    correct: f64,
    numerical_incorrect: f64,
    non_numerical: f64,
}

#[derive(Serialize)]
struct PredRow {
    truth: String,
    pred: String,
}

/// Writes `responses.jsonl`, `summary.json`, `ratio_by_digits.csv` and
/// `pred_vs_truth.csv`.
pub fn write_outputs(dir: &Path, responses: &[ProbeResponse]) -> Result<ProbeSummary> {
    fsutil::write_jsonl(&dir.join("responses.jsonl"), responses)?;
    let summary = probe::summarize(responses);
    fsutil::write_json(&dir.join("summary.json"), &summary)?;
    let ratios = summary.by_digits.iter().map(|d| RatioRow {
        digits: d.digits,
        n: d.counts.total(),
        correct: d.correct,
        numerical_incorrect: d.numerical_incorrect,
        non_numerical: d.non_numerical,
    });
    let header = ["digits", "n", "correct", "numerical_incorrect", "non_numerical"];
    fsutil::write_csv_with_header(&dir.join("ratio_by_digits.csv"), &header, ratios)?;
    let preds = probe::pred_vs_truth(responses).into_iter().map(|(truth, pred)| PredRow { truth, pred });
    fsutil::write_csv_with_header(&dir.join("pred_vs_truth.csv"), &["truth", "pred"], preds)?;
    Ok(summary)
}
