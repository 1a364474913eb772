//! Seeded dataset generators for addition in any radix and for finite binary
//! operation tables.
//!
//! Train and validation pairs are drawn uniformly from the training square
//! without repetition (uniqueness is enforced over their union). Test pairs
//! are drawn uniformly from the test square by rejection, discarding points
//! inside the training square when the exclusion is active; test duplicates
//! are allowed. Train/val and test use independent streams of the same seed.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::vocab::{TaskKind, VocabError, Vocabulary, COMPOSE, EQUALS, PLUS};

/// Bumped whenever generated bytes could change for the same inputs.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskGenError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquationExample {
    pub a: BigUint,
    pub b: BigUint,
    pub c: BigUint,
    pub input_text: String,
    pub answer_text: String,
}

impl EquationExample {
    /// Renders `a+b=` and `c` in the vocabulary's numeral system.
    pub fn addition(vocab: &Vocabulary, a: BigUint, b: BigUint) -> Self {
        let c = &a + &b;
        let input_text = format!("{}{PLUS}{}{EQUALS}", vocab.render_numeral(&a), vocab.render_numeral(&b));
        let answer_text = vocab.render_numeral(&c);
        Self { a, b, c, input_text, answer_text }
    }

    /// Recovers `(a, b, c)` from the rendered texts.
    pub fn reparse(&self, vocab: &Vocabulary) -> Option<(BigUint, BigUint, BigUint)> {
        let op = if vocab.is_addition() { PLUS } else { COMPOSE };
        let body = self.input_text.strip_suffix(EQUALS)?;
        let (a, b) = body.split_once(op)?;
        Some((vocab.parse_numeral(a)?, vocab.parse_numeral(b)?, vocab.parse_numeral(&self.answer_text)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    ExcludeTrainSquare,
    None,
}

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: u64,
    pub hi: u64,
}

impl Interval {
    pub const fn new(lo: u64, hi: u64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: u64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> u128 {
        (self.hi - self.lo) as u128 + 1
    }

    pub fn contains_big(&self, x: &BigUint) -> bool {
        crate::vocab::small(x).is_some_and(|v| self.contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_range: Interval,
    pub test_range: Interval,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub exclusion: Exclusion,
}

impl SplitSpec {
    /// 40k/5k pairs in `[500, 1500]^2`, 50k test pairs in `[0, 2500]^2` outside it.
    pub fn small_digit(seed: u64) -> Self {
        Self {
            train_range: Interval::new(500, 1500),
            test_range: Interval::new(0, 2500),
            n_train: 40_000,
            n_val: 5_000,
            n_test: 50_000,
            seed,
            exclusion: Exclusion::ExcludeTrainSquare,
        }
    }

    /// Training square `[500, 2500]^2`, test square `[0, 5500]^2`, same counts.
    pub fn larger_small_digit(seed: u64) -> Self {
        Self { train_range: Interval::new(500, 2500), test_range: Interval::new(0, 5500), ..Self::small_digit(seed) }
    }

    pub fn validate(&self) -> Result<(), TaskGenError> {
        let bad = |m: &str| Err(TaskGenError::InvalidSplit(m.into()));
        if self.train_range.lo > self.train_range.hi || self.test_range.lo > self.test_range.hi {
            return bad("inverted range");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split counts must be positive");
        }
        let train_space = self.train_range.width() * self.train_range.width();
        if train_space < (self.n_train + self.n_val) as u128 {
            return bad("training square too small for unique train and val pairs");
        }
        let test_space = self.test_range.width() * self.test_range.width();
        let admissible = match self.exclusion {
            Exclusion::ExcludeTrainSquare => {
                let inside = self.test_range.lo <= self.train_range.lo && self.train_range.hi <= self.test_range.hi;
                if !inside {
                    return bad("train range must lie inside the test range when excluding the train square");
                }
                test_space - train_space
            }
            Exclusion::None => test_space,
        };
        if admissible < self.n_test as u128 {
            return bad("admissible test space smaller than the requested count");
        }
        Ok(())
    }

    pub fn in_train_square(&self, a: u64, b: u64) -> bool {
        self.train_range.contains(a) && self.train_range.contains(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Provenance {
    Addition { task: TaskKind, spec: SplitSpec },
    BinopTable { spec: BinOpTableSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub examples: Vec<EquationExample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    /// Absent for operation tables, which split into train and test only.
    pub val: Option<Dataset>,
    pub test: Dataset,
}

pub fn gen_small_digit(seed: u64) -> Splits {
    gen_addition(TaskKind::DecimalAddition, &SplitSpec::small_digit(seed)).expect("small-digit spec is valid")
}

pub fn gen_larger_small_digit(seed: u64) -> Splits {
    gen_addition(TaskKind::DecimalAddition, &SplitSpec::larger_small_digit(seed)).expect("larger spec is valid")
}

pub fn gen_nbase(base: u32, spec: &SplitSpec) -> Result<Splits, TaskGenError> {
    let kind = if base == 10 { TaskKind::DecimalAddition } else { TaskKind::NbaseAddition { base } };
    gen_addition(kind, spec)
}

/// Range-based addition splits rendered in the numeral system of `kind`.
pub fn gen_addition(kind: TaskKind, spec: &SplitSpec) -> Result<Splits, TaskGenError> {
    let vocab = Vocabulary::build(kind)?;
    if !vocab.is_addition() {
        return Err(TaskGenError::InvalidSplit("range splits need an addition task".into()));
    }
    spec.validate()?;
    let provenance = Provenance::Addition { task: kind, spec: spec.clone() };
    let make = |a: u64, b: u64| EquationExample::addition(&vocab, BigUint::from(a), BigUint::from(b));

    let mut rng = Rng::derived(spec.seed, 0);
    let (lo, hi) = (spec.train_range.lo, spec.train_range.hi);
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(spec.n_train + spec.n_val);
    while pairs.len() < spec.n_train + spec.n_val {
        let a = rng.between(lo, hi);
        let b = rng.between(lo, hi);
        if seen.insert((a, b)) {
            pairs.push((a, b));
        }
    }
    let val_pairs = pairs.split_off(spec.n_train);

    let mut rng = Rng::derived(spec.seed, 1);
    let (tlo, thi) = (spec.test_range.lo, spec.test_range.hi);
    let mut test = Vec::with_capacity(spec.n_test);
    while test.len() < spec.n_test {
        let a = rng.between(tlo, thi);
        let b = rng.between(tlo, thi);
        if spec.exclusion == Exclusion::ExcludeTrainSquare && spec.in_train_square(a, b) {
            continue;
        }
        test.push(make(a, b));
    }

    let ds = |split, examples| Dataset { split, examples, provenance: provenance.clone() };
    Ok(Splits {
        train: ds(Split::Train, pairs.into_iter().map(|(a, b)| make(a, b)).collect()),
        val: Some(ds(Split::Val, val_pairs.into_iter().map(|(a, b)| make(a, b)).collect())),
        test: ds(Split::Test, test),
    })
}

/// An operand pair of the large-digit probe set with its exact sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LargePair {
    pub a: BigUint,
    pub b: BigUint,
    pub c: BigUint,
}

/// Operands whose decimal digit count is uniform on `1..=max_digits`; the
/// leading digit is nonzero unless the operand has a single digit.
pub fn gen_large_digit_pairs(n_pairs: usize, max_digits: usize, seed: u64) -> Result<Vec<LargePair>, TaskGenError> {
    if max_digits == 0 {
        return Err(TaskGenError::InvalidSplit("max_digits must be at least 1".into()));
    }
    let mut rng = Rng::derived(seed, 2);
    let operand = |rng: &mut Rng| {
        let n = rng.between(1, max_digits as u64) as usize;
        let mut digits = Vec::with_capacity(n);
        digits.push(if n == 1 { rng.below(10) } else { rng.between(1, 9) } as u8);
        for _ in 1..n {
            digits.push(rng.below(10) as u8);
        }
        BigUint::from_radix_be(&digits, 10).expect("decimal digits")
    };
    Ok((0..n_pairs)
        .map(|_| {
            let a = operand(&mut rng);
            let b = operand(&mut rng);
            let c = &a + &b;
            LargePair { a, b, c }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub coef: i64,
    pub a_pow: u32,
    pub b_pow: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BinOp {
    Add,
    Sub,
    /// `sum(coef * a^a_pow * b^b_pow)`.
    Polynomial { terms: Vec<PolyTerm> },
}

impl BinOp {
    pub fn apply(&self, a: u64, b: u64, p: u64) -> u64 {
        let m = p as i128;
        let r = match self {
            BinOp::Add => (a as i128 + b as i128) % m,
            BinOp::Sub => (a as i128 - b as i128).rem_euclid(m),
            BinOp::Polynomial { terms } => {
                let mut acc: i128 = 0;
                for t in terms {
                    let term = (t.coef as i128).rem_euclid(m) * pow_mod(a, t.a_pow, p) as i128 % m * pow_mod(b, t.b_pow, p) as i128;
                    acc = (acc + term) % m;
                }
                acc
            }
        };
        r as u64
    }
}

fn pow_mod(base: u64, exp: u32, m: u64) -> u64 {
    let m = m as u128;
    let mut result = 1u128 % m;
    let mut b = base as u128 % m;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            result = result * b % m;
        }
        b = b * b % m;
        e >>= 1;
    }
    result as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinOpTableSpec {
    pub modulus: u32,
    pub op: BinOp,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Full `p x p` table of `a ∘ b = c (mod p)`, shuffled and split with
/// `floor(train_fraction * p^2)` rows for training.
pub fn gen_binop_table(spec: &BinOpTableSpec) -> Result<Splits, TaskGenError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(TaskGenError::InvalidFraction(spec.train_fraction));
    }
    let kind = TaskKind::BinopTable { modulus: spec.modulus };
    let vocab = Vocabulary::build(kind)?;
    let p = spec.modulus as u64;
    let mut rows: Vec<EquationExample> = Vec::with_capacity((p * p) as usize);
    for a in 0..p {
        for b in 0..p {
            let c = spec.op.apply(a, b, p);
            rows.push(EquationExample {
                a: BigUint::from(a),
                b: BigUint::from(b),
                c: BigUint::from(c),
                input_text: format!("{a}{COMPOSE}{b}{EQUALS}"),
                answer_text: vocab.render_numeral(&BigUint::from(c)),
            });
        }
    }
    Rng::derived(spec.seed, 3).shuffle(&mut rows);
    let n_train = libm::floor(spec.train_fraction * rows.len() as f64) as usize;
    let test = rows.split_off(n_train);
    let provenance = Provenance::BinopTable { spec: spec.clone() };
    Ok(Splits {
        train: Dataset { split: Split::Train, examples: rows, provenance: provenance.clone() },
        val: None,
        test: Dataset { split: Split::Test, examples: test, provenance },
    })
}
