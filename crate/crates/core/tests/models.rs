use addlab_core::models::{Architecture, Batch, Model, ModelConfig, MlpConfig, Seq2seqConfig, TransformerConfig};
use addlab_core::taskgen::gen_small_digit;
use addlab_core::tensor::Tape;
use addlab_core::vocab::{TaskKind, TokenId, Vocabulary};
use addlab_core::Rng;

fn decimal() -> Vocabulary {
    Vocabulary::build(TaskKind::DecimalAddition).unwrap()
}

fn tiny(arch: Architecture) -> ModelConfig {
    match arch {
        Architecture::Mlp => ModelConfig::Mlp(MlpConfig { hidden_units: 16, n_fc_layers: 1, ..MlpConfig::default() }),
        Architecture::Seq2seq => ModelConfig::Seq2seq(Seq2seqConfig { embed_dim: 12, hidden_units: 16 }),
        Architecture::Transformer => ModelConfig::Transformer(TransformerConfig {
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 24,
            dropout_rate: 0.1,
        }),
    }
}

fn pairs(vocab: &Vocabulary, eqs: &[(&str, &str)]) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    eqs.iter().map(|(s, a)| (vocab.encode(s).unwrap().ids, vocab.encode(a).unwrap().ids)).collect()
}

fn batch(p: &[(Vec<TokenId>, Vec<TokenId>)]) -> Batch {
    let refs: Vec<(&[TokenId], &[TokenId])> = p.iter().map(|(s, a)| (&s[..], &a[..])).collect();
    Batch::new(&refs)
}

fn logits(model: &Model, b: &Batch) -> (Vec<usize>, Vec<f32>) {
    let mut tape = Tape::new();
    let v = model.forward(&mut tape, b, false, &mut Rng::seed(0)).unwrap();
    (tape.shape(v).to_vec(), tape.data(v).to_vec())
}

#[test]
fn default_param_counts_within_tolerance() {
    let targets = [(Architecture::Mlp, 1.3e6), (Architecture::Seq2seq, 3.3e6), (Architecture::Transformer, 3.2e6)];
    for (arch, target) in targets {
        let m = Model::new(&ModelConfig::default_for(arch), decimal(), 0).unwrap();
        let n = m.param_count() as f64;
        assert!((n - target).abs() / target <= 0.15, "{arch}: {n} vs {target}");
    }
}

#[test]
fn exact_default_param_counts() {
    // closed forms for the decimal vocabulary (15 classes)
    let v = 15usize;
    let mlp = (10 * v * 512 + 512) + 4 * (512 * 512 + 512) + (512 * 5 * v + 5 * v);
    let gru = |i: usize, h: usize| 3 * h * (i + h) + 6 * h;
    let s2s = 2 * v * 512 + 2 * gru(512, 512) + 512 * v + v;
    let d = 256;
    let attn = 4 * (d * d + d);
    let ff = (d * 256 + 256) + (256 * d + d);
    let ln = 2 * d;
    let tr = 2 * v * d + 3 * (attn + ff + 2 * ln) + 3 * (2 * attn + ff + 3 * ln) + 2 * ln + d * v + v;
    for (arch, want) in [(Architecture::Mlp, mlp), (Architecture::Seq2seq, s2s), (Architecture::Transformer, tr)] {
        let m = Model::new(&ModelConfig::default_for(arch), decimal(), 0).unwrap();
        assert_eq!(m.param_count(), want, "{arch}");
    }
}

#[test]
fn mlp_output_shape() {
    let vocab = decimal();
    let m = Model::new(&ModelConfig::default_for(Architecture::Mlp), vocab.clone(), 1).unwrap();
    let s = gen_small_digit(3);
    let p: Vec<_> = s.train.examples[..256]
        .iter()
        .map(|e| (vocab.encode(&e.input_text).unwrap().ids, vocab.encode(&e.answer_text).unwrap().ids))
        .collect();
    let (shape, _) = logits(&m, &batch(&p));
    assert_eq!(shape, vec![256, 5, 15]);
}

#[test]
fn mlp_zero_weights_give_uniform_softmax() {
    let vocab = decimal();
    let mut m = Model::new(&tiny(Architecture::Mlp), vocab.clone(), 1).unwrap();
    m.params_mut().iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|x| *x = 0.0));
    let b = batch(&pairs(&vocab, &[("12+34=", "46")]));
    let mut tape = Tape::new();
    let l = m.forward(&mut tape, &b, false, &mut Rng::seed(0)).unwrap();
    let p = tape.softmax(l, 2).unwrap();
    for &x in tape.data(p) {
        assert!((x - 1.0 / 15.0).abs() < 1e-7);
    }
}

#[test]
fn mlp_rejects_long_input() {
    let vocab = decimal();
    let m = Model::new(&tiny(Architecture::Mlp), vocab.clone(), 1).unwrap();
    let b = batch(&pairs(&vocab, &[("12345+1234=", "13579")]));
    let mut tape = Tape::new();
    assert!(m.forward(&mut tape, &b, false, &mut Rng::seed(0)).is_err());
    let src = vocab.encode("12345+1234=").unwrap();
    assert!(m.decode(&[&src.ids], 7).is_err());
}

#[test]
fn teacher_forcing_is_causal() {
    let vocab = decimal();
    for arch in [Architecture::Seq2seq, Architecture::Transformer] {
        let m = Model::new(&tiny(arch), vocab.clone(), 5).unwrap();
        let base = pairs(&vocab, &[("123+456=", "5791")]);
        let (shape, reference) = logits(&m, &batch(&base));
        let v = shape[2];
        for t in 1..shape[1] {
            // overwrite teacher tokens at positions >= t (BOS sits at 0)
            let mut p = base.clone();
            for a in p[0].1.iter_mut().skip(t - 1) {
                *a = vocab.id_of("0").unwrap();
            }
            let (_, perturbed) = logits(&m, &batch(&p));
            for pos in 0..t {
                for c in 0..v {
                    assert_eq!(reference[pos * v + c], perturbed[pos * v + c], "{arch} pos {pos} after change at {t}");
                }
            }
        }
    }
}

#[test]
fn pad_tail_does_not_change_logits() {
    let vocab = decimal();
    for arch in Architecture::ALL {
        let m = Model::new(&tiny(arch), vocab.clone(), 8).unwrap();
        let short = pairs(&vocab, &[("1+2=", "3")]);
        let (_, a) = logits(&m, &batch(&short));
        let mut wide = batch(&pairs(&vocab, &[("1+2=", "3"), ("1000+2000=", "3000")]));
        // keep only the first row, now padded to the wider source
        wide.size = 1;
        wide.src.truncate(wide.src_width);
        wide.src_lens.truncate(1);
        wide.tgt_in.truncate(wide.tgt_width);
        wide.tgt_out.truncate(wide.tgt_width);
        let (shape, b) = logits(&m, &wide);
        let steps = a.len() / shape[2];
        for i in 0..steps * shape[2] {
            assert!((a[i] - b[i]).abs() < 1e-5, "{arch}");
        }
    }
}

#[test]
fn batch_invariance() {
    let vocab = decimal();
    let eqs = [("12+34=", "46"), ("9999+1=", "10000"), ("5+5=", "10"), ("700+3000=", "3700")];
    for arch in Architecture::ALL {
        let m = Model::new(&tiny(arch), vocab.clone(), 9).unwrap();
        let all = pairs(&vocab, &eqs);
        let (shape, joint) = logits(&m, &batch(&all));
        let (w, v) = (shape[1], shape[2]);
        for (i, pair) in all.iter().enumerate() {
            let (s, alone) = logits(&m, &batch(std::slice::from_ref(pair)));
            for pos in 0..s[1] {
                for c in 0..v {
                    let d = (alone[pos * v + c] - joint[(i * w + pos) * v + c]).abs();
                    assert!(d < 1e-5, "{arch} example {i}: {d}");
                }
            }
        }
        let srcs: Vec<&[TokenId]> = all.iter().map(|p| &p.0[..]).collect();
        let together = m.decode(&srcs, 7).unwrap();
        for (i, s) in srcs.iter().enumerate() {
            assert_eq!(m.decode(&[s], 7).unwrap()[0], together[i], "{arch}");
        }
    }
}

#[test]
fn every_parameter_gets_gradient() {
    let vocab = decimal();
    let s = gen_small_digit(4);
    let p: Vec<_> = s.train.examples[..64]
        .iter()
        .map(|e| (vocab.encode(&e.input_text).unwrap().ids, vocab.encode(&e.answer_text).unwrap().ids))
        .collect();
    let b = batch(&p);
    for arch in Architecture::ALL {
        let mut m = Model::new(&tiny(arch), vocab.clone(), 2).unwrap();
        let mut tape = Tape::new();
        let loss = m.loss(&mut tape, &b, true, &mut Rng::seed(1)).unwrap();
        let grads = tape.backward(loss).unwrap();
        m.params_mut().zero_grad();
        grads.accumulate_into(&tape, m.params_mut());
        for (_, param) in m.params().iter() {
            assert!(param.grad.iter().any(|&g| g != 0.0), "{arch}: {} has no gradient", param.name);
        }
    }
}

#[test]
fn initial_loss_near_uniform() {
    let vocab = decimal();
    let s = gen_small_digit(4);
    let p: Vec<_> = s.train.examples[..128]
        .iter()
        .map(|e| (vocab.encode(&e.input_text).unwrap().ids, vocab.encode(&e.answer_text).unwrap().ids))
        .collect();
    for arch in Architecture::ALL {
        let m = Model::new(&ModelConfig::default_for(arch), vocab.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let loss = m.loss(&mut tape, &batch(&p), false, &mut Rng::seed(0)).unwrap();
        let l = tape.data(loss)[0] as f64;
        assert!(l <= (15f64).ln() + 0.5, "{arch}: {l}");
    }
}

#[test]
fn decode_is_deterministic_and_bounded() {
    let vocab = decimal();
    let src = vocab.encode("1234+4321=").unwrap();
    for arch in Architecture::ALL {
        let m = Model::new(&tiny(arch), vocab.clone(), 11).unwrap();
        let a = m.decode(&[&src.ids], 7).unwrap();
        let b = m.clone().decode(&[&src.ids], 7).unwrap();
        assert_eq!(a, b);
        assert!(a[0].tokens.len() <= 7);
        assert!(m.decode(&[&src.ids], 0).is_err());
    }
}

#[test]
fn same_seed_same_weights() {
    for arch in Architecture::ALL {
        let a = Model::new(&tiny(arch), decimal(), 42).unwrap();
        let b = Model::new(&tiny(arch), decimal(), 42).unwrap();
        let c = Model::new(&tiny(arch), decimal(), 43).unwrap();
        assert_eq!(a.params().snapshot(), b.params().snapshot());
        assert_ne!(a.params().snapshot(), c.params().snapshot());
    }
}
