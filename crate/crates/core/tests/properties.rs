use std::collections::BTreeSet;

use addlab_core::eval::{ErrorClass, Taxonomy};
use addlab_core::probe::{classify_response, Classification, Prompt};
use addlab_core::taskgen::{gen_addition, gen_binop_table, BinOp, BinOpTableSpec, EquationExample, Exclusion, Interval, PolyTerm, SplitSpec};
use addlab_core::tensor::{Tape, Tensor};
use addlab_core::train::MeanSd;
use addlab_core::vocab::{TaskKind, Vocabulary};
use addlab_core::Rng;
use num_bigint::{BigInt, BigUint};
use proptest::prelude::*;

fn big(x: u64) -> BigUint {
    BigUint::from(x)
}

/// Every nonzero `sum beta_i base^i` with `beta_i` in {-1, 0, 1}, i < digits.
fn brute_carry_set(base: i64, digits: u32) -> BTreeSet<i64> {
    let mut set = BTreeSet::new();
    for code in 0..3i64.pow(digits) {
        let (mut c, mut delta) = (code, 0);
        for i in 0..digits {
            delta += (c % 3 - 1) * base.pow(i);
            c /= 3;
        }
        if delta != 0 {
            set.insert(delta);
        }
    }
    set
}

/// Schoolbook decimal addition on strings.
fn add_strings(a: &str, b: &str) -> String {
    let (a, b): (Vec<u8>, Vec<u8>) = (a.bytes().rev().collect(), b.bytes().rev().collect());
    let mut out = Vec::new();
    let mut carry = 0;
    for i in 0..a.len().max(b.len()) {
        let s = a.get(i).map_or(0, |d| d - b'0') + b.get(i).map_or(0, |d| d - b'0') + carry;
        out.push(b'0' + s % 10);
        carry = s / 10;
    }
    if carry > 0 {
        out.push(b'1');
    }
    out.reverse();
    String::from_utf8(out).unwrap()
}

fn digit_string(max_len: usize) -> impl Strategy<Value = String> {
    (1..=max_len).prop_flat_map(|n| proptest::string::string_regex(&format!("[1-9][0-9]{{{}}}", n - 1)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn numerals_round_trip_in_any_base(base in 2u32..=36, x in any::<u64>(), y in any::<u64>()) {
        let v = Vocabulary::build(TaskKind::NbaseAddition { base }).unwrap();
        prop_assert_eq!(v.parse_numeral(&v.render_numeral(&big(x))), Some(big(x)));
        let e = EquationExample::addition(&v, big(x), big(y));
        let text = format!("{}{}", e.input_text, e.answer_text);
        prop_assert_eq!(v.decode(&v.encode(&text).unwrap()).unwrap(), text);
        prop_assert_eq!(e.reparse(&v), Some((big(x), big(y), big(x) + big(y))));
    }

    #[test]
    fn permuted_vocab_round_trips(seed in any::<u64>(), x in any::<u64>(), y in any::<u64>()) {
        let v = Vocabulary::build(TaskKind::DecimalAddition).unwrap().permute_digits(seed).unwrap();
        let e = EquationExample::addition(&v, big(x), big(y));
        let text = format!("{}{}", e.input_text, e.answer_text);
        prop_assert_eq!(v.decode(&v.encode(&text).unwrap()).unwrap(), text);
        prop_assert_eq!(v.parse_numeral(&e.answer_text), Some(big(x) + big(y)));
    }

    #[test]
    fn addition_splits_respect_their_spec(seed in any::<u64>(), lo in 0u64..20, width in 10u64..30, pad in 5u64..30) {
        let hi = lo + width;
        let spec = SplitSpec {
            train_range: Interval::new(lo, hi),
            test_range: Interval::new(0, hi + pad),
            n_train: 40,
            n_val: 10,
            n_test: 60,
            seed,
            exclusion: Exclusion::ExcludeTrainSquare,
        };
        let s = gen_addition(TaskKind::DecimalAddition, &spec).unwrap();
        let val = s.val.as_ref().unwrap();
        prop_assert_eq!((s.train.len(), val.len(), s.test.len()), (40, 10, 60));
        let mut seen = BTreeSet::new();
        for e in s.train.examples.iter().chain(&val.examples) {
            prop_assert!(spec.train_range.contains_big(&e.a) && spec.train_range.contains_big(&e.b));
            prop_assert!(seen.insert((e.a.clone(), e.b.clone())));
            prop_assert_eq!(&e.c, &(&e.a + &e.b));
        }
        for e in &s.test.examples {
            prop_assert!(spec.test_range.contains_big(&e.a) && spec.test_range.contains_big(&e.b));
            prop_assert!(!(spec.train_range.contains_big(&e.a) && spec.train_range.contains_big(&e.b)));
        }
        prop_assert_eq!(gen_addition(TaskKind::DecimalAddition, &spec).unwrap(), s);
    }

    #[test]
    fn binop_table_is_complete_and_correct(p in 2u32..23, seed in any::<u64>(), c1 in -5i64..5, c2 in -5i64..5) {
        let op = BinOp::Polynomial { terms: vec![PolyTerm { coef: c1, a_pow: 2, b_pow: 1 }, PolyTerm { coef: c2, a_pow: 0, b_pow: 3 }] };
        let spec = BinOpTableSpec { modulus: p, op, train_fraction: 0.3, seed };
        let s = gen_binop_table(&spec).unwrap();
        prop_assert_eq!(s.train.len() + s.test.len(), (p * p) as usize);
        prop_assert_eq!(s.train.len(), (0.3 * (p * p) as f64).floor() as usize);
        let mut cells = BTreeSet::new();
        for e in s.train.examples.iter().chain(&s.test.examples) {
            let (a, b) = (i128::try_from(e.a.clone()).unwrap(), i128::try_from(e.b.clone()).unwrap());
            let want = (c1 as i128 * a * a * b + c2 as i128 * b * b * b).rem_euclid(p as i128);
            prop_assert_eq!(i128::try_from(e.c.clone()).unwrap(), want);
            prop_assert!(cells.insert((a, b)));
        }
    }

    #[test]
    fn carry_class_matches_brute_force(truth in 0u64..100_000, delta in -3000i64..3000) {
        let set = brute_carry_set(10, 4);
        let pred = truth as i64 + delta;
        prop_assume!(pred >= 0);
        let class = Taxonomy::default().classify_error(&big(pred as u64), &big(truth));
        match class {
            ErrorClass::Correct => prop_assert_eq!(delta, 0),
            ErrorClass::Carry { ref betas } => {
                prop_assert!(set.contains(&delta));
                let value: i64 = betas.iter().fold(0, |acc, &b| acc * 10 + b as i64);
                prop_assert_eq!(value, delta);
            }
            ErrorClass::Truncation { beta } => {
                prop_assert!(!set.contains(&delta));
                prop_assert_eq!(truth, 10 * pred as u64 + beta as u64);
            }
            ErrorClass::Other => {
                prop_assert!(!set.contains(&delta) && delta != 0);
                prop_assert!(truth < 10 * pred as u64 || truth - 10 * pred as u64 >= 10);
            }
        }
    }

    #[test]
    fn binary_carry_class_matches_brute_force(delta in -40i64..40) {
        let set = brute_carry_set(2, 4);
        let tax = Taxonomy { base: 2, carry_digits: 4 };
        let got = tax.carry_betas(&BigInt::from(delta)).is_some();
        prop_assert_eq!(got, set.contains(&delta));
    }

    #[test]
    fn classification_is_total_and_consistent(raw in ".{0,40}", truth in digit_string(30)) {
        let (class, parsed) = classify_response(&raw, &truth);
        let truth_value: BigInt = truth.parse().unwrap();
        match class {
            Classification::Correct => prop_assert_eq!(parsed, Some(truth_value)),
            Classification::NumericalIncorrect => prop_assert!(parsed.is_some_and(|p| p != truth_value)),
            Classification::NonNumerical => prop_assert!(parsed.is_none()),
        }
    }

    #[test]
    fn hundred_digit_sums_classify_exactly(a in digit_string(100), b in digit_string(100), flip in 0usize..101) {
        let p = Prompt::new(0, &a.parse().unwrap(), &b.parse().unwrap());
        let sum = add_strings(&a, &b);
        prop_assert_eq!(&p.truth, &sum);
        prop_assert_eq!(p.digit_bucket(), a.len().max(b.len()));
        prop_assert_eq!(Prompt::reparse(&p.text), Some((a.parse().unwrap(), b.parse().unwrap())));
        prop_assert_eq!(classify_response(&format!(" {sum}.\n"), &p.truth).0, Classification::Correct);
        let mut wrong = sum.clone().into_bytes();
        let i = flip % wrong.len();
        wrong[i] = if wrong[i] == b'9' { b'8' } else { wrong[i] + 1 };
        let wrong = String::from_utf8(wrong).unwrap();
        prop_assert_eq!(classify_response(&wrong, &p.truth).0, Classification::NumericalIncorrect);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::seed(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-30.0, 30.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, cols], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.data(y).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardises(rows in 1usize..5, cols in 2usize..40, seed in any::<u64>()) {
        let mut rng = Rng::seed(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-5.0, 5.0) * 3.0 + 7.0).collect();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, cols], data.clone()).unwrap());
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let eps = 1e-9;
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        let stats = |row: &[f64]| {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        };
        for (out, inp) in tape.data(y).chunks(cols).zip(data.chunks(cols)) {
            let (mean, var) = stats(out);
            let (_, in_var) = stats(inp);
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - in_var / (in_var + eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_sd_matches_definition(xs in proptest::collection::vec(-100.0f64..100.0, 2..20)) {
        let m = MeanSd::of(&xs).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!((m.mean - mean).abs() < 1e-9 && (m.sd - sd).abs() < 1e-9);
    }
}

#[test]
fn dropout_keeps_within_three_sigma_and_rescales() {
    let n = 100_000;
    for rate in [0.1, 0.5] {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let mut rng = Rng::seed(11);
        let y = tape.dropout(x, rate, true, &mut rng).unwrap();
        let kept = tape.data(y).iter().filter(|&&v| v != 0.0).count() as f64;
        let expect = n as f64 * (1.0 - rate);
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((kept - expect).abs() <= 3.0 * sigma, "rate {rate}: kept {kept}, expected {expect} +- {}", 3.0 * sigma);
        let scale = 1.0 / (1.0 - rate) as f32;
        assert!(tape.data(y).iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-6));
    }
}

#[test]
fn dropout_is_identity_at_eval_and_seeded_in_training() {
    let run = |seed, training| {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(&[64], 2.0));
        let y = tape.dropout(x, 0.3, training, &mut Rng::seed(seed)).unwrap();
        tape.data(y).to_vec()
    };
    assert_eq!(run(1, false), vec![2.0; 64]);
    assert_eq!(run(1, true), run(1, true));
    assert_ne!(run(1, true), run(2, true));
}

#[test]
fn generators_are_seeded() {
    let spec = |seed| SplitSpec {
        train_range: Interval::new(0, 50),
        test_range: Interval::new(0, 80),
        n_train: 100,
        n_val: 20,
        n_test: 100,
        seed,
        exclusion: Exclusion::ExcludeTrainSquare,
    };
    let a = gen_addition(TaskKind::DecimalAddition, &spec(1)).unwrap();
    assert_eq!(a, gen_addition(TaskKind::DecimalAddition, &spec(1)).unwrap());
    assert_ne!(a.train.examples, gen_addition(TaskKind::DecimalAddition, &spec(2)).unwrap().train.examples);
}
