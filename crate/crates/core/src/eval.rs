//! Exact-match scoring, the error-line taxonomy and plot-ready views of a
//! model's predictions.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::models::{Model, ModelError};
use crate::taskgen::{EquationExample, Interval};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

/// Character-for-character equality of the decoded prediction and the truth.
pub fn exact_match(vocab: &Vocabulary, pred: &TokenSeq, truth_text: &str) -> bool {
    vocab.decode(pred).is_ok_and(|s| s == truth_text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(with = "crate::decimal")]
    pub a: BigUint,
    #[serde(with = "crate::decimal")]
    pub b: BigUint,
    #[serde(with = "crate::decimal")]
    pub truth: BigUint,
    pub pred_tokens: TokenSeq,
    /// Decoded prediction text, absent if it contains undefined ids.
    pub pred_text: Option<String>,
    #[serde(with = "crate::decimal::option")]
    pub pred_value: Option<BigUint>,
    pub exact_match: bool,
    pub truncated: bool,
}

impl PredictionRecord {
    pub fn new(vocab: &Vocabulary, example: &EquationExample, pred: TokenSeq, truncated: bool) -> Self {
        let pred_text = vocab.decode(&pred).ok();
        let exact = pred_text.as_deref() == Some(example.answer_text.as_str());
        Self {
            a: example.a.clone(),
            b: example.b.clone(),
            truth: example.c.clone(),
            pred_value: vocab.parse_tokens(&pred),
            pred_tokens: pred,
            pred_text,
            exact_match: exact,
            truncated,
        }
    }

    /// `pred_value - truth` for parsed predictions.
    pub fn error(&self) -> Option<BigInt> {
        self.pred_value.as_ref().map(|p| BigInt::from(p.clone()) - BigInt::from(self.truth.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum ErrorClass {
    Correct,
    /// Coefficients of the place values, most significant first.
    Carry { betas: Vec<i8> },
    Truncation { beta: u32 },
    Other,
}

impl ErrorClass {
    pub fn name(&self) -> &'static str {
        match self {
            ErrorClass::Correct => "correct",
            ErrorClass::Carry { .. } => "carry",
            ErrorClass::Truncation { .. } => "truncation",
            ErrorClass::Other => "other",
        }
    }
}

/// Radix and number of place values used by the carry lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub base: u32,
    pub carry_digits: usize,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self { base: 10, carry_digits: 4 }
    }
}

impl Taxonomy {
    /// Balanced-digit decomposition of `delta` over `carry_digits` places with
    /// every coefficient in {-1, 0, 1}, most significant first.
    pub fn carry_betas(&self, delta: &BigInt) -> Option<Vec<i8>> {
        if delta.is_zero() {
            return None;
        }
        let mut betas = vec![0i8; self.carry_digits];
        self.fill_betas(delta.clone(), self.carry_digits, &mut betas).then_some(betas)
    }

    /// Least significant place first. In base 2 both +1 and -1 match an odd
    /// residue, so each is tried.
    fn fill_betas(&self, rest: BigInt, places: usize, betas: &mut [i8]) -> bool {
        if places == 0 {
            return rest.is_zero();
        }
        let base = BigInt::from(self.base);
        let r = ((&rest % &base) + &base) % &base;
        for beta in [0i8, 1, -1] {
            let b = BigInt::from(beta);
            if ((&b % &base) + &base) % &base != r {
                continue;
            }
            betas[places - 1] = beta;
            if self.fill_betas((&rest - &b) / &base, places - 1, betas) {
                return true;
            }
        }
        false
    }

    /// Value-level class of a prediction; carry wins over truncation.
    pub fn classify_error(&self, pred: &BigUint, truth: &BigUint) -> ErrorClass {
        if pred == truth {
            return ErrorClass::Correct;
        }
        let delta = BigInt::from(pred.clone()) - BigInt::from(truth.clone());
        if let Some(betas) = self.carry_betas(&delta) {
            return ErrorClass::Carry { betas };
        }
        let shifted = pred * self.base;
        if truth >= &shifted {
            if let Some(beta) = (truth - shifted).to_u32().filter(|&b| b < self.base) {
                return ErrorClass::Truncation { beta };
            }
        }
        ErrorClass::Other
    }

    /// Record-level class. A non-matching record whose value still equals the
    /// truth (leading zeros) and malformed predictions are `Other`.
    pub fn classify_record(&self, r: &PredictionRecord) -> ErrorClass {
        if r.exact_match {
            return ErrorClass::Correct;
        }
        match &r.pred_value {
            Some(p) if p != &r.truth => self.classify_error(p, &r.truth),
            _ => ErrorClass::Other,
        }
    }
}

pub fn classify_error(pred: &BigUint, truth: &BigUint) -> ErrorClass {
    Taxonomy::default().classify_error(pred, truth)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyCounts {
    pub correct: usize,
    pub carry: usize,
    pub truncation: usize,
    pub other: usize,
}

impl TaxonomyCounts {
    pub fn total(&self) -> usize {
        self.correct + self.carry + self.truncation + self.other
    }

    fn add(&mut self, class: &ErrorClass) {
        match class {
            ErrorClass::Correct => self.correct += 1,
            ErrorClass::Carry { .. } => self.carry += 1,
            ErrorClass::Truncation { .. } => self.truncation += 1,
            ErrorClass::Other => self.other += 1,
        }
    }

    /// Largest error class ("carry", "truncation" or "other"); `None` without
    /// errors or on a tie for first place.
    pub fn plurality_error(&self) -> Option<&'static str> {
        let mut classes = [("carry", self.carry), ("truncation", self.truncation), ("other", self.other)];
        classes.sort_by(|x, y| y.1.cmp(&x.1));
        (classes[0].1 > 0 && classes[0].1 > classes[1].1).then_some(classes[0].0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Interpolation,
    Extrapolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapPoint {
    #[serde(with = "crate::decimal")]
    pub a: BigUint,
    #[serde(with = "crate::decimal")]
    pub b: BigUint,
    pub correct: bool,
    pub regime: Regime,
}

pub fn regime(a: &BigUint, b: &BigUint, square: Interval) -> Regime {
    if square.contains_big(a) && square.contains_big(b) {
        Regime::Interpolation
    } else {
        Regime::Extrapolation
    }
}

pub fn extrapolation_map(records: &[PredictionRecord], square: Interval) -> Vec<MapPoint> {
    records
        .iter()
        .map(|r| MapPoint { a: r.a.clone(), b: r.b.clone(), correct: r.exact_match, regime: regime(&r.a, &r.b, square) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCount {
    #[serde(with = "crate::decimal")]
    pub error: BigInt,
    pub count: usize,
}

/// Most frequent `pred - truth` values among non-matching parsed records.
/// Ties rank smaller magnitude first, then positive before negative.
pub fn top_errors(records: &[PredictionRecord], k: usize) -> Vec<ErrorCount> {
    let mut counts: BTreeMap<BigInt, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.exact_match) {
        if let Some(e) = r.error() {
            *counts.entry(e).or_default() += 1;
        }
    }
    let mut ranked: Vec<ErrorCount> = counts.into_iter().map(|(error, count)| ErrorCount { error, count }).collect();
    ranked.sort_by(|x, y| {
        y.count
            .cmp(&x.count)
            .then_with(|| x.error.abs().cmp(&y.error.abs()))
            .then_with(|| (x.error.sign() == Sign::Minus).cmp(&(y.error.sign() == Sign::Minus)))
    });
    ranked.truncate(k);
    ranked
}

/// Fraction of all predictions whose value lies in `[lo, hi]`. Malformed
/// predictions count as outside; zero for no records.
pub fn fraction_within(records: &[PredictionRecord], lo: u64, hi: u64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let (lo, hi) = (BigUint::from(lo), BigUint::from(hi));
    let inside = records.iter().filter_map(|r| r.pred_value.as_ref()).filter(|v| **v >= lo && **v <= hi).count();
    inside as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub em_percent: f64,
    #[serde(with = "crate::decimal::option")]
    pub answer_min: Option<BigUint>,
    #[serde(with = "crate::decimal::option")]
    pub answer_max: Option<BigUint>,
    pub taxonomy: TaxonomyCounts,
    pub top_errors: Vec<ErrorCount>,
    pub records: Vec<PredictionRecord>,
    pub classes: Vec<ErrorClass>,
}

impl EvalReport {
    pub fn from_records(records: Vec<PredictionRecord>, taxonomy: Taxonomy, k: usize) -> Self {
        let n = records.len();
        let em = records.iter().filter(|r| r.exact_match).count();
        let classes: Vec<ErrorClass> = records.iter().map(|r| taxonomy.classify_record(r)).collect();
        let mut counts = TaxonomyCounts::default();
        classes.iter().for_each(|c| counts.add(c));
        let values = || records.iter().filter_map(|r| r.pred_value.as_ref());
        Self {
            n,
            em_percent: if n == 0 { 0.0 } else { 100.0 * em as f64 / n as f64 },
            answer_min: values().min().cloned(),
            answer_max: values().max().cloned(),
            taxonomy: counts,
            top_errors: top_errors(&records, k),
            classes,
            records,
        }
    }
}

/// Decoding budget for a split: its longest answer plus two.
pub fn max_decode_len(vocab: &Vocabulary, examples: &[EquationExample]) -> usize {
    examples.iter().map(|e| vocab.encode(&e.answer_text).map(|s| s.len()).unwrap_or(0)).max().unwrap_or(0) + 2
}

/// Greedy predictions for `examples`, decoded in chunks of `batch_size`.
pub fn predict(model: &Model, examples: &[EquationExample], batch_size: usize) -> Result<Vec<PredictionRecord>, ModelError> {
    let vocab = model.vocab();
    let max_len = max_decode_len(vocab, examples);
    let mut records = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let sources: Vec<TokenSeq> =
            chunk.iter().map(|e| vocab.encode(&e.input_text)).collect::<Result<_, _>>().map_err(|e| ModelError::Config(alloc::format!("{e}")))?;
        let refs: Vec<&[TokenId]> = sources.iter().map(|s| &s.ids[..]).collect();
        for (e, d) in chunk.iter().zip(model.decode(&refs, max_len)?) {
            records.push(PredictionRecord::new(vocab, e, d.tokens, d.truncated));
        }
    }
    Ok(records)
}

pub fn em_percent(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    100.0 * records.iter().filter(|r| r.exact_match).count() as f64 / records.len() as f64
}

pub fn evaluate(model: &Model, examples: &[EquationExample], batch_size: usize) -> Result<EvalReport, ModelError> {
    let taxonomy = Taxonomy { base: model.vocab().kind().base(), ..Taxonomy::default() };
    Ok(EvalReport::from_records(predict(model, examples, batch_size)?, taxonomy, 100))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{TaskKind, EOS};

    fn vocab() -> Vocabulary {
        Vocabulary::build(TaskKind::DecimalAddition).unwrap()
    }

    fn seq(v: &Vocabulary, s: &str) -> TokenSeq {
        let mut t = v.encode(s).unwrap();
        t.ids.push(EOS);
        t
    }

    fn big(x: u64) -> BigUint {
        BigUint::from(x)
    }

    #[test]
    fn exact_match_is_strict() {
        let v = vocab();
        assert!(exact_match(&v, &seq(&v, "2000"), "2000"));
        assert!(!exact_match(&v, &seq(&v, "02000"), "2000"));
        assert!(!exact_match(&v, &v.encode("200").unwrap(), "2000"));
    }

    #[test]
    fn error_lines() {
        let t = Taxonomy::default();
        assert_eq!(t.classify_error(&big(3345), &big(2345)), ErrorClass::Carry { betas: vec![1, 0, 0, 0] });
        assert_eq!(t.classify_error(&big(1345), &big(2345)), ErrorClass::Carry { betas: vec![-1, 0, 0, 0] });
        assert_eq!(t.classify_error(&big(2345 + 909), &big(2345)), ErrorClass::Carry { betas: vec![1, -1, 1, -1] });
        assert_eq!(t.classify_error(&big(234), &big(2345)), ErrorClass::Truncation { beta: 5 });
        assert_eq!(t.classify_error(&big(2345 + 1234), &big(2345)), ErrorClass::Other);
        assert_eq!(t.classify_error(&big(7), &big(7)), ErrorClass::Correct);
        // 1 + 9 = 10: both a carry (+1) and truncation (10 = 10*1 + 0); carry wins
        assert_eq!(t.classify_error(&big(1), &big(10)), ErrorClass::Carry { betas: vec![0, 0, -1, 1] });
    }

    #[test]
    fn carry_digits_parameter() {
        let t = Taxonomy { base: 10, carry_digits: 5 };
        assert_eq!(t.classify_error(&big(12345), &big(2345)), ErrorClass::Carry { betas: vec![1, 0, 0, 0, 0] });
        assert_eq!(classify_error(&big(12345), &big(2345)), ErrorClass::Other);
    }

    fn record(v: &Vocabulary, a: u64, b: u64, pred: &str) -> PredictionRecord {
        let e = EquationExample::addition(v, big(a), big(b));
        PredictionRecord::new(v, &e, seq(v, pred), false)
    }

    #[test]
    fn leading_zero_and_malformed_are_other() {
        let v = vocab();
        let t = Taxonomy::default();
        let r = record(&v, 1000, 1000, "02000");
        assert!(!r.exact_match);
        assert_eq!(r.pred_value, Some(big(2000)));
        assert_eq!(t.classify_record(&r), ErrorClass::Other);
        let r = record(&v, 1000, 1000, "20+0");
        assert_eq!(r.pred_value, None);
        assert_eq!(t.classify_record(&r), ErrorClass::Other);
    }

    #[test]
    fn top_errors_ranking() {
        let v = vocab();
        let mut rs = Vec::new();
        for _ in 0..3 {
            rs.push(record(&v, 1000, 1000, "3000"));
        }
        for _ in 0..2 {
            rs.push(record(&v, 1000, 1000, "1000"));
        }
        rs.push(record(&v, 1000, 1000, "2007"));
        let top = top_errors(&rs, 2);
        assert_eq!(top, vec![ErrorCount { error: 1000.into(), count: 3 }, ErrorCount { error: (-1000).into(), count: 2 }]);
        rs.push(record(&v, 1000, 1000, "1993"));
        let top = top_errors(&rs, 10);
        assert_eq!(top[2].error, BigInt::from(7));
        assert_eq!(top[3].error, BigInt::from(-7));
        assert!(top_errors(&[record(&v, 1, 1, "2")], 5).is_empty());
    }

    #[test]
    fn report_arithmetic() {
        let v = vocab();
        // answers are "10".."19"; the first three are predicted correctly
        let rs: Vec<_> = (0..10u64).map(|i| record(&v, 10, i, &alloc::format!("{}", if i < 3 { 10 + i } else { 0 }))).collect();
        let rep = EvalReport::from_records(rs, Taxonomy::default(), 100);
        assert!((rep.em_percent - 30.0).abs() < 1e-12);
        assert_eq!(rep.taxonomy.total(), 10);
        assert_eq!(rep.taxonomy.correct, 3);
        assert_eq!(rep.answer_min, Some(big(0)));
        assert_eq!(rep.answer_max, Some(big(12)));
    }

    #[test]
    fn regimes() {
        let sq = Interval::new(500, 1500);
        assert_eq!(regime(&big(700), &big(900), sq), Regime::Interpolation);
        assert_eq!(regime(&big(0), &big(2500), sq), Regime::Extrapolation);
    }

    #[test]
    fn plurality() {
        let c = TaxonomyCounts { correct: 9, carry: 5, truncation: 2, other: 4 };
        assert_eq!(c.plurality_error(), Some("carry"));
        assert_eq!(TaxonomyCounts { correct: 1, ..Default::default() }.plurality_error(), None);
        assert_eq!(TaxonomyCounts { carry: 2, other: 2, ..Default::default() }.plurality_error(), None);
    }
}
