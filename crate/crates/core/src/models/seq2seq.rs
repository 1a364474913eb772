use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::init;
use super::{greedy, Batch, Decoded, ModelError, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2seqConfig {
    pub embed_dim: usize,
    pub hidden_units: usize,
}

impl Default for Seq2seqConfig {
    fn default() -> Self {
        Self { embed_dim: 512, hidden_units: 512 }
    }
}

impl Seq2seqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_units == 0 {
            return Err(ModelError::Config("seq2seq sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Per-gate weights; gate order is reset, update, candidate.
#[derive(Debug, Clone, Copy)]
struct Gru {
    w_i: [ParamId; 3],
    w_h: [ParamId; 3],
    b_i: [ParamId; 3],
    b_h: [ParamId; 3],
}

#[derive(Clone, Copy)]
struct GruVars {
    w_i: [Var; 3],
    w_h: [Var; 3],
    b_i: [Var; 3],
    b_h: [Var; 3],
}

const GATES: [&str; 3] = ["r", "z", "n"];

impl Gru {
    fn new(params: &mut ParamStore<f32>, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Self {
        let mut make = |kind: &str, shape: &[usize]| {
            GATES.map(|g| init::uniform(params, rng, &alloc::format!("{name}.{kind}_{g}"), shape, hidden))
        };
        let w_i = make("w_i", &[input, hidden]);
        let w_h = make("w_h", &[hidden, hidden]);
        let b_i = make("b_i", &[hidden]);
        let b_h = make("b_h", &[hidden]);
        Gru { w_i, w_h, b_i, b_h }
    }

    fn load(&self, tape: &mut Tape<f32>, params: &ParamStore<f32>) -> GruVars {
        let mut load = |ids: [ParamId; 3]| ids.map(|id| tape.param(params, id));
        GruVars { w_i: load(self.w_i), w_h: load(self.w_h), b_i: load(self.b_i), b_h: load(self.b_h) }
    }
}

impl GruVars {
    /// One step from input `x` (`[batch, in]`) and state `h` (`[batch, H]`).
    fn step(&self, tape: &mut Tape<f32>, x: Var, h: Var) -> Result<Var> {
        let mut pre = [(x, h); 3];
        for (g, p) in pre.iter_mut().enumerate() {
            *p = (tape.linear(x, self.w_i[g], self.b_i[g])?, tape.linear(h, self.w_h[g], self.b_h[g])?);
        }
        let [(xr, hr), (xz, hz), (xn, hn)] = pre;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        Ok(tape.add(n, zd)?)
    }
}

/// GRU encoder and GRU decoder; the decoder starts from the encoder's final
/// hidden state and sees no other view of the source.
#[derive(Debug, Clone)]
pub struct Seq2seq {
    config: Seq2seqConfig,
    vocab: Vocabulary,
    params: ParamStore<f32>,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Gru,
    decoder: Gru,
    out: (ParamId, ParamId),
}

struct Loaded {
    src_embed: Var,
    tgt_embed: Var,
    encoder: GruVars,
    decoder: GruVars,
    out_w: Var,
    out_b: Var,
}

impl Seq2seq {
    pub fn new(config: Seq2seqConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, h) = (vocab.size(), config.embed_dim, config.hidden_units);
        let mut params = ParamStore::new();
        let src_embed = init::embedding(&mut params, rng, "encoder.embed", v, e);
        let encoder = Gru::new(&mut params, rng, "encoder.gru", e, h);
        let tgt_embed = init::embedding(&mut params, rng, "decoder.embed", v, e);
        let decoder = Gru::new(&mut params, rng, "decoder.gru", e, h);
        let out = init::linear(&mut params, rng, "decoder.out", h, v);
        Ok(Self { config, vocab, params, src_embed, tgt_embed, encoder, decoder, out })
    }

    pub fn config(&self) -> &Seq2seqConfig {
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

    fn load(&self, tape: &mut Tape<f32>) -> Loaded {
        Loaded {
            src_embed: tape.param(&self.params, self.src_embed),
            tgt_embed: tape.param(&self.params, self.tgt_embed),
            encoder: self.encoder.load(tape, &self.params),
            decoder: self.decoder.load(tape, &self.params),
            out_w: tape.param(&self.params, self.out.0),
            out_b: tape.param(&self.params, self.out.1),
        }
    }

    /// Column `t` of a right-padded `[batch, width]` id matrix.
    fn column(ids: &[TokenId], width: usize, t: usize) -> Vec<usize> {
        ids.chunks(width).map(|row| row[t] as usize).collect()
    }

    /// Final encoder state `[batch, H]`; PAD steps leave the state untouched.
    fn encode(&self, tape: &mut Tape<f32>, p: &Loaded, batch: &Batch) -> Result<Var> {
        let (b, h) = (batch.size, self.config.hidden_units);
        let mut state = tape.constant(Tensor::zeros(&[b, h]));
        for step in 0..batch.src_width {
            let x = tape.embedding(p.src_embed, &Self::column(&batch.src, batch.src_width, step))?;
            let next = p.encoder.step(tape, x, state)?;
            if batch.src_lens.iter().all(|&l| step < l) {
                state = next;
            } else {
                let mask: Vec<f32> = batch.src_lens.iter().map(|&l| if step < l { 1.0 } else { 0.0 }).collect();
                let m = tape.constant(Tensor::new(&[b, 1], mask)?);
                let d = tape.sub(next, state)?;
                let d = tape.mul(m, d)?;
                state = tape.add(state, d)?;
            }
        }
        Ok(state)
    }

    /// Teacher-forced logits `[batch, tgt_width, vocab]`.
    pub fn forward(&self, tape: &mut Tape<f32>, batch: &Batch, _training: bool, _rng: &mut Rng) -> Result<Var> {
        if batch.size == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let p = self.load(tape);
        let mut state = self.encode(tape, &p, batch)?;
        let (b, h) = (batch.size, self.config.hidden_units);
        let mut outputs = Vec::with_capacity(batch.tgt_width);
        for step in 0..batch.tgt_width {
            let x = tape.embedding(p.tgt_embed, &Self::column(&batch.tgt_in, batch.tgt_width, step))?;
            state = p.decoder.step(tape, x, state)?;
            outputs.push(tape.reshape(state, &[b, 1, h])?);
        }
        let hs = tape.concat(&outputs, 1)?;
        Ok(tape.linear(hs, p.out_w, p.out_b)?)
    }

    pub fn decode(&self, sources: &[&[TokenId]], max_len: usize) -> Result<Vec<Decoded>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::sources(sources);
        let mut tape = Tape::new();
        let p = self.load(&mut tape);
        let mut state = self.encode(&mut tape, &p, &batch)?;
        let v = self.vocab.size();
        greedy(batch.size, max_len, |prefixes| {
            let last: Vec<usize> = prefixes.iter().map(|p| *p.last().unwrap() as usize).collect();
            let x = tape.embedding(p.tgt_embed, &last)?;
            state = p.decoder.step(&mut tape, x, state)?;
            let logits = tape.linear(state, p.out_w, p.out_b)?;
            Ok(tape.data(logits).chunks(v).map(|r| r.to_vec()).collect())
        })
    }
}
