//! Adam, the per-trial training loop with best-validation selection, and
//! multi-seed trial summaries.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::eval::{em_percent, predict};
use crate::models::{Architecture, Batch, Model, ModelConfig, ModelError};
use crate::rng::Rng;
use crate::taskgen::EquationExample;
use crate::tensor::{ParamStore, Real, Tape, Tensor};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn for_architecture(arch: Architecture) -> Self {
        match arch {
            Architecture::Mlp | Architecture::Seq2seq => Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            Architecture::Transformer => Self { lr: 1e-4, beta1: 0.9, beta2: 0.98, epsilon: 1e-9 },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.epsilon > 0.0 && unit(self.beta1) && unit(self.beta2)) {
            return Err(TrainError::Config(alloc::format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::ZERO; p.value.len()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<(), TrainError> {
    if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(TrainError::NonFiniteGradient { param: p.name.clone() });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::ONE - b1, T::ONE - b2);
    let bc1 = T::from_f64(1.0 - libm::pow(cfg.beta1, t as f64));
    let bc2 = T::from_f64(1.0 - libm::pow(cfg.beta2, t as f64));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.epsilon));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = p.grad[j];
            m[j] = b1 * m[j] + c1 * g;
            v[j] = b2 * v[j] + c2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Examples decoded together during validation and test.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 256, epochs: 100, seed: 0, shuffle: true, eval_batch_size: 500 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_batch_size == 0 {
            return Err(TrainError::Config("batch sizes and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub epoch: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_em: Option<f64>,
    pub test_em: Option<f64>,
    pub best_checkpoint: Option<String>,
    pub wall_clock_secs: f64,
    pub failure: Option<TrialFailure>,
}

impl TrialRecord {
    pub fn completed(&self) -> bool {
        self.failure.is_none() && self.test_em.is_some()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrialData<'a> {
    pub train: &'a [EquationExample],
    pub val: &'a [EquationExample],
    pub test: &'a [EquationExample],
}

/// Callbacks fired while a trial runs.
pub trait TrialObserver {
    /// After each epoch's validation. `improved` is set when this epoch is the
    /// new best and `model` holds its weights.
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _model: &Model, _improved: bool) {}
}

impl TrialObserver for () {}

/// Index of the first maximum.
pub fn best_epoch_index(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn encode_pairs(vocab: &Vocabulary, examples: &[EquationExample]) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>, TrainError> {
    examples
        .iter()
        .map(|e| Ok((vocab.encode(&e.input_text)?.ids, vocab.encode(&e.answer_text)?.ids)))
        .collect::<Result<_, crate::vocab::VocabError>>()
        .map_err(|e| TrainError::Config(alloc::format!("dataset does not match the model vocabulary: {e}")))
}

#[cfg(feature = "std")]
struct Clock(std::time::Instant);
#[cfg(feature = "std")]
impl Clock {
    fn start() -> Self {
        Clock(std::time::Instant::now())
    }
    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
#[cfg(not(feature = "std"))]
struct Clock;
#[cfg(not(feature = "std"))]
impl Clock {
    fn start() -> Self {
        Clock
    }
    fn secs(&self) -> f64 {
        0.0
    }
}

/// Mean loss of one pass over `pairs` in the given order, updating weights.
fn train_epoch(
    model: &mut Model,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    order: &[usize],
    cfg: &TrainConfig,
    adam: &AdamConfig,
    state: &mut AdamState<f32>,
    dropout: &mut Rng,
    epoch: usize,
) -> Result<f64, (usize, TrainError)> {
    let mut total = 0.0;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<(&[TokenId], &[TokenId])> = chunk.iter().map(|&i| (&pairs[i].0[..], &pairs[i].1[..])).collect();
        let batch = Batch::new(&refs);
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &batch, true, dropout).map_err(|e| (step, e.into()))?;
        let value = tape.data(loss)[0] as f64;
        if !value.is_finite() {
            return Err((step, TrainError::NonFiniteLoss { epoch, step }));
        }
        let grads = tape.backward(loss).map_err(|e| (step, ModelError::from(e).into()))?;
        let params = model.params_mut();
        params.zero_grad();
        grads.accumulate_into(&tape, params);
        adam_step(params, state, adam).map_err(|e| (step, e))?;
        total += value * chunk.len() as f64;
    }
    Ok(total / order.len().max(1) as f64)
}

/// Trains `model` for `cfg.epochs`, keeps the weights of the best validation
/// epoch (earliest on ties), restores them and scores the test split once.
pub fn train_trial(
    model: &mut Model,
    data: TrialData<'_>,
    cfg: &TrainConfig,
    adam: &AdamConfig,
    observer: &mut dyn TrialObserver,
) -> Result<TrialRecord, TrainError> {
    cfg.validate()?;
    adam.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::Config("train and validation splits must be non-empty".into()));
    }
    let clock = Clock::start();
    let pairs = encode_pairs(model.vocab(), data.train)?;
    let mut record = TrialRecord {
        seed: cfg.seed,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_em: None,
        test_em: None,
        best_checkpoint: None,
        wall_clock_secs: 0.0,
        failure: None,
    };
    let mut state = AdamState::new(model.params());
    let mut shuffler = Rng::derived(cfg.seed, 20);
    let mut dropout = Rng::derived(cfg.seed, 21);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            shuffler.shuffle(&mut order);
        }
        let train_loss = match train_epoch(model, &pairs, &order, cfg, adam, &mut state, &mut dropout, epoch) {
            Ok(l) => l,
            Err((step, e)) => {
                record.failure = Some(TrialFailure { epoch, step, message: alloc::format!("{e}") });
                break;
            }
        };
        let val_em = em_percent(&predict(model, data.val, cfg.eval_batch_size)?);
        let metrics = EpochMetrics { epoch, train_loss, val_em };
        record.epochs.push(metrics);
        let improved = best.as_ref().is_none_or(|(b, _)| val_em > *b);
        if improved {
            best = Some((val_em, model.params().snapshot()));
            record.best_epoch = Some(epoch);
            record.best_val_em = Some(val_em);
        }
        observer.on_epoch(&metrics, model, improved);
    }
    if let Some((_, weights)) = &best {
        model.params_mut().restore(weights);
        if record.failure.is_none() {
            record.test_em = Some(em_percent(&predict(model, data.test, cfg.eval_batch_size)?));
        }
    }
    record.wall_clock_secs = clock.secs();
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
        };
        Some(Self { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub completed: usize,
    pub failed: usize,
    pub val_em: Option<MeanSd>,
    pub test_em: Option<MeanSd>,
}

pub fn summarize(records: &[TrialRecord]) -> TrialSummary {
    let done: Vec<&TrialRecord> = records.iter().filter(|r| r.completed()).collect();
    let val: Vec<f64> = done.iter().filter_map(|r| r.best_val_em).collect();
    let test: Vec<f64> = done.iter().filter_map(|r| r.test_em).collect();
    TrialSummary { completed: done.len(), failed: records.len() - done.len(), val_em: MeanSd::of(&val), test_em: MeanSd::of(&test) }
}

/// Sequential trials; trial `i` initialises and shuffles with `base_seed + i`.
pub fn run_trials(
    config: &ModelConfig,
    vocab: &Vocabulary,
    data: TrialData<'_>,
    train: &TrainConfig,
    adam: &AdamConfig,
    n_trials: usize,
    base_seed: u64,
) -> Result<(Vec<TrialRecord>, TrialSummary), TrainError> {
    if n_trials == 0 {
        return Err(TrainError::Config("n_trials must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(n_trials);
    for i in 0..n_trials as u64 {
        let seed = base_seed + i;
        let mut model = Model::new(config, vocab.clone(), seed)?;
        let cfg = TrainConfig { seed, ..train.clone() };
        records.push(train_trial(&mut model, data, &cfg, adam, &mut ())?);
    }
    let summary = summarize(&records);
    Ok((records, summary))
}
