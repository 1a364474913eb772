use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::init;
use super::{argmax, Batch, Decoded, ModelError, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::{TokenId, Vocabulary, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_units: usize,
    /// Hidden-to-hidden layers after the input layer.
    pub n_fc_layers: usize,
    pub dropout_rate: f64,
    pub input_len: usize,
    pub output_len: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        // `dddd+dddd=` in, up to five answer digits out
        Self { hidden_units: 512, n_fc_layers: 4, dropout_rate: 0.1, input_len: 10, output_len: 5 }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.input_len == 0 || self.output_len == 0 {
            return Err(ModelError::Config("mlp widths and lengths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One-hot concatenated input, ReLU + dropout hidden stack, and one softmax
/// head per answer position. Unused answer positions predict PAD.
#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpConfig,
    vocab: Vocabulary,
    params: ParamStore<f32>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new(config: MlpConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let v = vocab.size();
        let h = config.hidden_units;
        let mut params = ParamStore::new();
        let mut layers = vec![init::linear(&mut params, rng, "input", config.input_len * v, h)];
        for i in 0..config.n_fc_layers {
            layers.push(init::linear(&mut params, rng, &alloc::format!("hidden{i}"), h, h));
        }
        layers.push(init::linear(&mut params, rng, "output", h, config.output_len * v));
        Ok(Self { config, vocab, params, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn one_hot(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let (l, v) = (self.config.input_len, self.vocab.size());
        let mut x = vec![0.0f32; batch.size * l * v];
        for (i, &len) in batch.src_lens.iter().enumerate() {
            if len > l {
                return Err(ModelError::InputTooLong { len, max: l });
            }
            for t in 0..l {
                let id = if t < batch.src_width { batch.src[i * batch.src_width + t] } else { PAD };
                x[(i * l + t) * v + id as usize] = 1.0;
            }
        }
        Ok(Tensor::new(&[batch.size, l * v], x)?)
    }

    /// Logits `[batch, output_len, vocab]`.
    pub fn forward(&self, tape: &mut Tape<f32>, batch: &Batch, training: bool, rng: &mut Rng) -> Result<Var> {
        if batch.size == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mut x = tape.constant(self.one_hot(batch)?);
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(&self.params, w), tape.param(&self.params, b));
            x = tape.linear(x, w, b)?;
            if i < last {
                x = tape.relu(x);
                x = tape.dropout(x, self.config.dropout_rate, training, rng)?;
            }
        }
        Ok(tape.reshape(x, &[batch.size, self.config.output_len, self.vocab.size()])?)
    }

    /// The answer right-padded with PAD to `output_len`.
    pub fn targets(&self, batch: &Batch) -> Result<Vec<TokenId>> {
        let l = self.config.output_len;
        let mut out = vec![PAD; batch.size * l];
        for i in 0..batch.size {
            let row = &batch.tgt_out[i * batch.tgt_width..(i + 1) * batch.tgt_width];
            let answer: Vec<TokenId> = row.iter().copied().take_while(|&t| t != EOS && t != PAD).collect();
            if answer.len() > l {
                return Err(ModelError::AnswerTooLong { len: answer.len(), max: l });
            }
            out[i * l..i * l + answer.len()].copy_from_slice(&answer);
        }
        Ok(out)
    }

    /// Per-position argmax; the answer ends at the first PAD, EOS or special.
    pub fn decode(&self, sources: &[&[TokenId]], max_len: usize) -> Result<Vec<Decoded>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::sources(sources);
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, &batch, false, &mut Rng::seed(0))?;
        let v = self.vocab.size();
        let l = self.config.output_len;
        let data = tape.data(logits);
        Ok((0..batch.size)
            .map(|i| {
                let mut steps = Vec::with_capacity(l + 1);
                for p in 0..l {
                    let id = argmax(&data[(i * l + p) * v..(i * l + p + 1) * v]) as TokenId;
                    if (id as usize) < crate::vocab::N_SPECIAL {
                        break;
                    }
                    steps.push(id);
                }
                steps.push(EOS);
                Decoded::from_steps(&steps, max_len)
            })
            .collect())
    }
}
