use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::init;
use super::{greedy, Batch, Decoded, ModelError, Result};
use crate::rng::Rng;
use crate::tensor::{AttentionMask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { n_layers_enc: 3, n_layers_dec: 3, n_heads: 8, d_model: 256, d_ff: 256, dropout_rate: 0.1 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(ModelError::Config("transformer sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(alloc::format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let angle = pos as f64 / libm::pow(10000.0, (2 * (i / 2)) as f64 / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) } as f32;
        }
    }
    Tensor::new(&[len, dim], data).expect("shape matches")
}

#[derive(Debug, Clone, Copy)]
struct Linear(ParamId, ParamId);

#[derive(Debug, Clone, Copy)]
struct Norm(ParamId, ParamId);

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward(Linear, Linear);

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attn,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attn,
    norm1: Norm,
    cross_attn: Attn,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

fn linear(p: &mut ParamStore<f32>, rng: &mut Rng, name: &str, i: usize, o: usize) -> Linear {
    let (w, b) = init::linear(p, rng, name, i, o);
    Linear(w, b)
}

fn norm(p: &mut ParamStore<f32>, name: &str, d: usize) -> Norm {
    Norm(
        init::constant(p, &alloc::format!("{name}.gamma"), &[d], 1.0),
        init::constant(p, &alloc::format!("{name}.beta"), &[d], 0.0),
    )
}

fn attn(p: &mut ParamStore<f32>, rng: &mut Rng, name: &str, d: usize) -> Attn {
    Attn {
        q: linear(p, rng, &alloc::format!("{name}.q"), d, d),
        k: linear(p, rng, &alloc::format!("{name}.k"), d, d),
        v: linear(p, rng, &alloc::format!("{name}.v"), d, d),
        o: linear(p, rng, &alloc::format!("{name}.o"), d, d),
    }
}

fn feed_forward(p: &mut ParamStore<f32>, rng: &mut Rng, name: &str, d: usize, ff: usize) -> FeedForward {
    FeedForward(
        linear(p, rng, &alloc::format!("{name}.ff1"), d, ff),
        linear(p, rng, &alloc::format!("{name}.ff2"), ff, d),
    )
}

/// Encoder-decoder Transformer with post-norm residual blocks, a final norm
/// on each stack and untied embeddings.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    vocab: Vocabulary,
    params: ParamStore<f32>,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

/// Forward context for one tape.
struct Ctx<'a> {
    model: &'a Transformer,
    training: bool,
    rng: &'a mut Rng,
}

impl Ctx<'_> {
    fn p(&self, tape: &mut Tape<f32>, id: ParamId) -> Var {
        tape.param(&self.model.params, id)
    }

    fn linear(&self, tape: &mut Tape<f32>, x: Var, l: Linear) -> Result<Var> {
        let (w, b) = (self.p(tape, l.0), self.p(tape, l.1));
        Ok(tape.linear(x, w, b)?)
    }

    fn norm(&self, tape: &mut Tape<f32>, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (self.p(tape, n.0), self.p(tape, n.1));
        Ok(tape.layer_norm(x, g, b, 1e-5)?)
    }

    fn dropout(&mut self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        Ok(tape.dropout(x, self.model.config.dropout_rate, self.training, self.rng)?)
    }

    fn attention(&self, tape: &mut Tape<f32>, a: Attn, x: Var, mem: Var, mask: &AttentionMask) -> Result<Var> {
        let q = self.linear(tape, x, a.q)?;
        let k = self.linear(tape, mem, a.k)?;
        let v = self.linear(tape, mem, a.v)?;
        let y = tape.attention(q, k, v, self.model.config.n_heads, mask)?;
        self.linear(tape, y, a.o)
    }

    fn feed_forward(&mut self, tape: &mut Tape<f32>, f: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(tape, x, f.0)?;
        let h = tape.relu(h);
        let h = self.dropout(tape, h)?;
        self.linear(tape, h, f.1)
    }

    /// `norm(x + dropout(y))`.
    fn residual(&mut self, tape: &mut Tape<f32>, x: Var, y: Var, n: Norm) -> Result<Var> {
        let y = self.dropout(tape, y)?;
        let s = tape.add(x, y)?;
        self.norm(tape, s, n)
    }

    fn embed(&mut self, tape: &mut Tape<f32>, table: ParamId, ids: &[TokenId], b: usize, t: usize) -> Result<Var> {
        let d = self.model.config.d_model;
        let table = self.p(tape, table);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = tape.embedding(table, &ids)?;
        let e = tape.reshape(e, &[b, t, d])?;
        let e = tape.scale(e, libm::sqrt(d as f64));
        let pe = tape.constant(positional_encoding(t, d));
        let e = tape.add(e, pe)?;
        self.dropout(tape, e)
    }

    /// Encoder memory `[batch, src_width, d_model]`.
    fn encode(&mut self, tape: &mut Tape<f32>, batch: &Batch) -> Result<Var> {
        let m = self.model;
        let mut x = self.embed(tape, m.src_embed, &batch.src, batch.size, batch.src_width)?;
        let mask = AttentionMask { causal: false, key_padding: Some(batch.src_padding()) };
        for layer in &m.encoder {
            let y = self.attention(tape, layer.attn, x, x, &mask)?;
            x = self.residual(tape, x, y, layer.norm1)?;
            let y = self.feed_forward(tape, layer.ff, x)?;
            x = self.residual(tape, x, y, layer.norm2)?;
        }
        self.norm(tape, x, m.enc_norm)
    }

    /// Logits `[batch, t, vocab]` for decoder inputs `tgt` (`[batch, t]`).
    fn decode(&mut self, tape: &mut Tape<f32>, memory: Var, src_pad: &[bool], tgt: &[TokenId], b: usize, t: usize) -> Result<Var> {
        let m = self.model;
        let mut x = self.embed(tape, m.tgt_embed, tgt, b, t)?;
        let causal = AttentionMask { causal: true, key_padding: None };
        let cross = AttentionMask { causal: false, key_padding: Some(src_pad.to_vec()) };
        for layer in &m.decoder {
            let y = self.attention(tape, layer.self_attn, x, x, &causal)?;
            x = self.residual(tape, x, y, layer.norm1)?;
            let y = self.attention(tape, layer.cross_attn, x, memory, &cross)?;
            x = self.residual(tape, x, y, layer.norm2)?;
            let y = self.feed_forward(tape, layer.ff, x)?;
            x = self.residual(tape, x, y, layer.norm3)?;
        }
        let x = self.norm(tape, x, m.dec_norm)?;
        self.linear(tape, x, m.out)
    }
}

impl Transformer {
    pub fn new(config: TransformerConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, ff) = (vocab.size(), config.d_model, config.d_ff);
        let mut p = ParamStore::new();
        let src_embed = init::embedding(&mut p, rng, "encoder.embed", v, d);
        let encoder = (0..config.n_layers_enc)
            .map(|i| {
                let name = alloc::format!("encoder.{i}");
                EncoderLayer {
                    attn: attn(&mut p, rng, &alloc::format!("{name}.attn"), d),
                    norm1: norm(&mut p, &alloc::format!("{name}.norm1"), d),
                    ff: feed_forward(&mut p, rng, &name, d, ff),
                    norm2: norm(&mut p, &alloc::format!("{name}.norm2"), d),
                }
            })
            .collect();
        let enc_norm = norm(&mut p, "encoder.norm", d);
        let tgt_embed = init::embedding(&mut p, rng, "decoder.embed", v, d);
        let decoder = (0..config.n_layers_dec)
            .map(|i| {
                let name = alloc::format!("decoder.{i}");
                DecoderLayer {
                    self_attn: attn(&mut p, rng, &alloc::format!("{name}.self_attn"), d),
                    norm1: norm(&mut p, &alloc::format!("{name}.norm1"), d),
                    cross_attn: attn(&mut p, rng, &alloc::format!("{name}.cross_attn"), d),
                    norm2: norm(&mut p, &alloc::format!("{name}.norm2"), d),
                    ff: feed_forward(&mut p, rng, &name, d, ff),
                    norm3: norm(&mut p, &alloc::format!("{name}.norm3"), d),
                }
            })
            .collect();
        let dec_norm = norm(&mut p, "decoder.norm", d);
        let out = linear(&mut p, rng, "decoder.out", d, v);
        Ok(Self { config, vocab, params: p, src_embed, tgt_embed, encoder, enc_norm, decoder, dec_norm, out })
    }

    pub fn config(&self) -> &TransformerConfig {
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

    /// Teacher-forced logits `[batch, tgt_width, vocab]`.
    pub fn forward(&self, tape: &mut Tape<f32>, batch: &Batch, training: bool, rng: &mut Rng) -> Result<Var> {
        if batch.size == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mut ctx = Ctx { model: self, training, rng };
        let memory = ctx.encode(tape, batch)?;
        ctx.decode(tape, memory, &batch.src_padding(), &batch.tgt_in, batch.size, batch.tgt_width)
    }

    /// Greedy decoding; the full prefix is re-run through the decoder each step.
    pub fn decode(&self, sources: &[&[TokenId]], max_len: usize) -> Result<Vec<Decoded>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::sources(sources);
        let mut rng = Rng::seed(0);
        let mut ctx = Ctx { model: self, training: false, rng: &mut rng };
        let mut tape = Tape::new();
        let memory = ctx.encode(&mut tape, &batch)?;
        let src_pad = batch.src_padding();
        let v = self.vocab.size();
        greedy(batch.size, max_len, |prefixes| {
            let t = prefixes[0].len();
            let flat: Vec<TokenId> = prefixes.iter().flatten().copied().collect();
            let logits = ctx.decode(&mut tape, memory, &src_pad, &flat, batch.size, t)?;
            let data = tape.data(logits);
            Ok((0..batch.size).map(|i| data[((i + 1) * t - 1) * v..(i + 1) * t * v].to_vec()).collect())
        })
    }
}
