//! The three architectures compared on the addition task: a one-hot MLP, a
//! GRU encoder-decoder and an encoder-decoder Transformer.
//!
//! Every model consumes the equation tokens (`a+b=`, no specials) and is
//! trained to emit the answer followed by EOS. Sequence models read a
//! BOS-prefixed target under teacher forcing and decode greedily.

mod batch;
mod init;
mod mlp;
mod seq2seq;
mod transformer;

pub use batch::Batch;
pub use mlp::{Mlp, MlpConfig};
pub use seq2seq::{Seq2seq, Seq2seqConfig};
pub use transformer::{Transformer, TransformerConfig};

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, TensorError, Var};
use crate::vocab::{TokenId, TokenSeq, Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input of {len} tokens exceeds the model's input length {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("answer of {len} tokens (with EOS) exceeds the model's output length {max}")]
    AnswerTooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Seq2seq,
    Transformer,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Mlp, Architecture::Seq2seq, Architecture::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::Seq2seq => "seq2seq",
            Architecture::Transformer => "transformer",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Mlp => "MLP",
            Architecture::Seq2seq => "Seq2seq",
            Architecture::Transformer => "Transformer",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> core::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Architecture::Mlp),
            "seq2seq" => Ok(Architecture::Seq2seq),
            "transformer" => Ok(Architecture::Transformer),
            other => Err(alloc::format!("unknown architecture {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp(MlpConfig),
    Seq2seq(Seq2seqConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn default_for(arch: Architecture) -> Self {
        match arch {
            Architecture::Mlp => ModelConfig::Mlp(MlpConfig::default()),
            Architecture::Seq2seq => ModelConfig::Seq2seq(Seq2seqConfig::default()),
            Architecture::Transformer => ModelConfig::Transformer(TransformerConfig::default()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::Mlp(_) => Architecture::Mlp,
            ModelConfig::Seq2seq(_) => Architecture::Seq2seq,
            ModelConfig::Transformer(_) => Architecture::Transformer,
        }
    }
}

/// Output of greedy decoding for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, ending with EOS unless truncated.
    pub tokens: TokenSeq,
    /// No EOS was produced within the length budget.
    pub truncated: bool,
}

impl Decoded {
    pub(crate) fn from_steps(steps: &[TokenId], max_len: usize) -> Self {
        match steps.iter().take(max_len).position(|&t| t == EOS) {
            Some(p) => Decoded { tokens: TokenSeq::new(steps[..=p].to_vec()), truncated: false },
            None => Decoded { tokens: TokenSeq::new(steps.iter().take(max_len).copied().collect()), truncated: true },
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Mlp(Mlp),
    Seq2seq(Seq2seq),
    Transformer(Transformer),
}

impl Model {
    /// Freshly initialised model; `seed` drives weight initialisation only.
    pub fn new(config: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = Rng::derived(seed, 10);
        Ok(match config {
            ModelConfig::Mlp(c) => Model::Mlp(Mlp::new(c.clone(), vocab, &mut rng)?),
            ModelConfig::Seq2seq(c) => Model::Seq2seq(Seq2seq::new(c.clone(), vocab, &mut rng)?),
            ModelConfig::Transformer(c) => Model::Transformer(Transformer::new(c.clone(), vocab, &mut rng)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Mlp(_) => Architecture::Mlp,
            Model::Seq2seq(_) => Architecture::Seq2seq,
            Model::Transformer(_) => Architecture::Transformer,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Mlp(m) => ModelConfig::Mlp(m.config().clone()),
            Model::Seq2seq(m) => ModelConfig::Seq2seq(m.config().clone()),
            Model::Transformer(m) => ModelConfig::Transformer(m.config().clone()),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Model::Mlp(m) => m.vocab(),
            Model::Seq2seq(m) => m.vocab(),
            Model::Transformer(m) => m.vocab(),
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::Mlp(m) => m.params(),
            Model::Seq2seq(m) => m.params(),
            Model::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Model::Mlp(m) => m.params_mut(),
            Model::Seq2seq(m) => m.params_mut(),
            Model::Transformer(m) => m.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    /// Per-position class logits `[batch, steps, vocab]` under teacher forcing.
    pub fn forward(&self, tape: &mut Tape<f32>, batch: &Batch, training: bool, rng: &mut Rng) -> Result<Var> {
        match self {
            Model::Mlp(m) => m.forward(tape, batch, training, rng),
            Model::Seq2seq(m) => m.forward(tape, batch, training, rng),
            Model::Transformer(m) => m.forward(tape, batch, training, rng),
        }
    }

    /// Targets aligned with [`forward`](Self::forward)'s logits.
    pub fn targets(&self, batch: &Batch) -> Result<Vec<TokenId>> {
        match self {
            Model::Mlp(m) => m.targets(batch),
            _ => Ok(batch.tgt_out.clone()),
        }
    }

    /// Mean cross-entropy over target positions. Sequence models skip PAD;
    /// the MLP treats PAD as the class of unused answer positions.
    pub fn loss(&self, tape: &mut Tape<f32>, batch: &Batch, training: bool, rng: &mut Rng) -> Result<Var> {
        let logits = self.forward(tape, batch, training, rng)?;
        let targets: Vec<usize> = self.targets(batch)?.into_iter().map(|t| t as usize).collect();
        let ignore = match self {
            Model::Mlp(_) => usize::MAX,
            _ => crate::vocab::PAD as usize,
        };
        Ok(tape.cross_entropy(logits, &targets, ignore)?)
    }

    /// Greedy decoding of at most `max_len` tokens (EOS included) per source.
    pub fn decode(&self, sources: &[&[TokenId]], max_len: usize) -> Result<Vec<Decoded>> {
        if max_len == 0 {
            return Err(ModelError::Config("max_len must be at least 1".into()));
        }
        match self {
            Model::Mlp(m) => m.decode(sources, max_len),
            Model::Seq2seq(m) => m.decode(sources, max_len),
            Model::Transformer(m) => m.decode(sources, max_len),
        }
    }
}

/// Greedy autoregressive loop shared by the sequence models.
///
/// `step` receives every prefix (BOS first) and returns next-token logits per
/// example. Finished examples are extended with PAD so every prefix has the
/// same length.
pub fn greedy<F>(n: usize, max_len: usize, mut step: F) -> Result<Vec<Decoded>>
where
    F: FnMut(&[Vec<TokenId>]) -> Result<Vec<Vec<f32>>>,
{
    let mut prefixes: Vec<Vec<TokenId>> = (0..n).map(|_| alloc::vec![crate::vocab::BOS]).collect();
    let mut done = alloc::vec![false; n];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let logits = step(&prefixes)?;
        for (i, row) in logits.iter().enumerate() {
            if done[i] {
                prefixes[i].push(crate::vocab::PAD);
                continue;
            }
            let id = argmax(row) as TokenId;
            prefixes[i].push(id);
            done[i] = id == EOS;
        }
    }
    Ok(prefixes.iter().map(|p| Decoded::from_steps(&p[1..], max_len)).collect())
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
