//! Symbol alphabets and tokenization.
//!
//! Ids 0, 1 and 2 are always PAD, BOS and EOS; task symbols follow from id 3
//! in the order of [`Vocabulary::symbols`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const N_SPECIAL: usize = 3;

pub const PLUS: &str = "+";
pub const EQUALS: &str = "=";
pub const COMPOSE: &str = "∘";

/// Digit characters for bases up to 36.
const DIGITS: &[u8; 36] = b"0123456789abcdefghijklmnopqrstuvwxyz";
pub const MAX_BASE: u32 = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    DecimalAddition,
    NbaseAddition { base: u32 },
    BinopTable { modulus: u32 },
}

impl TaskKind {
    /// Radix of the numerals this task renders.
    pub fn base(&self) -> u32 {
        match *self {
            TaskKind::DecimalAddition => 10,
            TaskKind::NbaseAddition { base } => base,
            TaskKind::BinopTable { modulus } => modulus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("invalid base {0}: must be in 2..={MAX_BASE}")]
    InvalidBase(u32),
    #[error("invalid modulus {0}: must be at least 2")]
    InvalidModulus(u32),
    #[error("unknown symbol {ch:?} at position {position}")]
    UnknownSymbol { ch: char, position: usize },
    #[error("token id {0} is not defined in this vocabulary")]
    UnknownId(TokenId),
    #[error("digit permutation applies to addition vocabularies only")]
    NotAddition,
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
}

/// Token-level form of an equation or answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks every id is defined, there is at most one EOS, and no PAD
    /// precedes a non-PAD token.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), VocabError> {
        let mut seen_pad = false;
        let mut eos = 0;
        for &id in &self.ids {
            if id as usize >= vocab.size() {
                return Err(VocabError::UnknownId(id));
            }
            if id == PAD {
                seen_pad = true;
            } else if seen_pad {
                return Err(VocabError::Malformed("PAD before a non-PAD token".into()));
            }
            if id == EOS {
                eos += 1;
            }
        }
        if eos > 1 {
            return Err(VocabError::Malformed("more than one EOS".into()));
        }
        Ok(())
    }

    /// Ids before the first EOS with PAD and BOS stripped.
    pub fn content(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.ids.iter().copied().take_while(|&t| t != EOS).filter(|&t| t != PAD && t != BOS)
    }
}

/// Bijective map between task symbols and token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    kind: TaskKind,
    symbols: Vec<String>,
    id_of: BTreeMap<String, TokenId>,
    max_symbol_chars: usize,
}

/// Serialized layout: ordered symbols plus the special-token ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub task: TaskKind,
    pub specials: Specials,
    pub symbols: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub struct Specials {
    #[serde(rename = "PAD")]
    pub pad: TokenId,
    #[serde(rename = "BOS")]
    pub bos: TokenId,
    #[serde(rename = "EOS")]
    pub eos: TokenId,
}

impl Default for Specials {
    fn default() -> Self {
        Self { pad: PAD, bos: BOS, eos: EOS }
    }
}

impl Vocabulary {
    pub fn build(kind: TaskKind) -> Result<Self, VocabError> {
        let symbols: Vec<String> = match kind {
            TaskKind::DecimalAddition => digit_symbols(10).chain([PLUS.to_string(), EQUALS.to_string()]).collect(),
            TaskKind::NbaseAddition { base } => {
                if !(2..=MAX_BASE).contains(&base) {
                    return Err(VocabError::InvalidBase(base));
                }
                digit_symbols(base).chain([PLUS.to_string(), EQUALS.to_string()]).collect()
            }
            TaskKind::BinopTable { modulus } => {
                if modulus < 2 {
                    return Err(VocabError::InvalidModulus(modulus));
                }
                (0..modulus).map(|r| r.to_string()).chain([COMPOSE.to_string(), EQUALS.to_string()]).collect()
            }
        };
        Self::from_symbols(kind, symbols)
    }

    fn from_symbols(kind: TaskKind, symbols: Vec<String>) -> Result<Self, VocabError> {
        let mut id_of = BTreeMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(VocabError::Malformed("empty symbol".into()));
            }
            if id_of.insert(s.clone(), (i + N_SPECIAL) as TokenId).is_some() {
                return Err(VocabError::Malformed(alloc::format!("duplicate symbol {s:?}")));
            }
        }
        let max_symbol_chars = symbols.iter().map(|s| s.chars().count()).max().unwrap_or(1);
        Ok(Self { kind, symbols, id_of, max_symbol_chars })
    }

    pub fn from_file(file: VocabularyFile) -> Result<Self, VocabError> {
        if file.specials != Specials::default() {
            return Err(VocabError::Malformed("special token ids must be PAD=0, BOS=1, EOS=2".into()));
        }
        let v = Self::from_symbols(file.task, file.symbols)?;
        let mut expected: Vec<String> = Self::build(file.task)?.symbols;
        let mut got = v.symbols.clone();
        expected.sort();
        got.sort();
        if expected != got {
            return Err(VocabError::Malformed("symbol set does not match the task".into()));
        }
        Ok(v)
    }

    pub fn to_file(&self) -> VocabularyFile {
        VocabularyFile { task: self.kind, specials: Specials::default(), symbols: self.symbols.clone() }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// Task symbols in id order (first one has id 3).
    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Total size including the three special tokens.
    pub fn size(&self) -> usize {
        self.symbols.len() + N_SPECIAL
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.id_of.get(symbol).copied()
    }

    pub fn symbol_of(&self, id: TokenId) -> Option<&str> {
        match id {
            PAD => Some("<PAD>"),
            BOS => Some("<BOS>"),
            EOS => Some("<EOS>"),
            _ => self.symbols.get(id as usize - N_SPECIAL).map(String::as_str),
        }
    }

    pub fn is_addition(&self) -> bool {
        !matches!(self.kind, TaskKind::BinopTable { .. })
    }

    /// Tokenizes by longest symbol match; appends no special tokens.
    pub fn encode(&self, text: &str) -> Result<TokenSeq, VocabError> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut ids = Vec::with_capacity(chars.len());
        let mut pos = 0;
        while pos < chars.len() {
            let mut matched = None;
            for width in (1..=self.max_symbol_chars.min(chars.len() - pos)).rev() {
                let start = chars[pos].0;
                let end = chars.get(pos + width).map_or(text.len(), |c| c.0);
                if let Some(id) = self.id_of(&text[start..end]) {
                    matched = Some((id, width));
                    break;
                }
            }
            let (id, width) = matched.ok_or(VocabError::UnknownSymbol { ch: chars[pos].1, position: pos })?;
            ids.push(id);
            pos += width;
        }
        Ok(TokenSeq { ids })
    }

    /// Renders task symbols, skipping BOS/PAD and stopping at the first EOS.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in &seq.ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => out.push_str(self.symbol_of(id).ok_or(VocabError::UnknownId(id))?),
            }
        }
        Ok(out)
    }

    /// Digit symbols shuffled among the digit ids; operators keep their ids.
    pub fn permute_digits(&self, seed: u64) -> Result<Self, VocabError> {
        if !self.is_addition() {
            return Err(VocabError::NotAddition);
        }
        let n_digits = self.kind.base() as usize;
        let mut symbols = self.symbols.clone();
        Rng::seed(seed).shuffle(&mut symbols[..n_digits]);
        Self::from_symbols(self.kind, symbols)
    }

    /// Digit value of a single symbol in this task's radix.
    pub fn digit_value(&self, symbol: &str) -> Option<u32> {
        let base = self.kind.base();
        match self.kind {
            TaskKind::BinopTable { .. } => symbol.parse::<u32>().ok().filter(|&v| v < base && v.to_string() == symbol),
            _ => {
                let mut it = symbol.bytes();
                let b = it.next()?;
                if it.next().is_some() {
                    return None;
                }
                DIGITS[..base as usize].iter().position(|&d| d == b).map(|p| p as u32)
            }
        }
    }

    /// Renders a non-negative integer in this task's numeral system.
    pub fn render_numeral(&self, value: &BigUint) -> String {
        match self.kind {
            TaskKind::BinopTable { .. } => value.to_string(),
            _ => {
                let base = self.kind.base();
                if value.is_zero() {
                    return "0".into();
                }
                value.to_radix_be(base).iter().map(|&d| DIGITS[d as usize] as char).collect()
            }
        }
    }

    /// Parses text as a numeral of this task. Leading zeros are accepted;
    /// anything else that is not a digit makes the text malformed.
    pub fn parse_numeral(&self, text: &str) -> Option<BigUint> {
        if text.is_empty() {
            return None;
        }
        match self.kind {
            TaskKind::BinopTable { .. } => self.digit_value(text).map(BigUint::from),
            _ => {
                let base = self.kind.base();
                let digits: Option<Vec<u8>> = text
                    .bytes()
                    .map(|b| DIGITS[..base as usize].iter().position(|&d| d == b).map(|p| p as u8))
                    .collect();
                BigUint::from_radix_be(&digits?, base)
            }
        }
    }

    /// Numeral value of a predicted token sequence, if well formed.
    pub fn parse_tokens(&self, seq: &TokenSeq) -> Option<BigUint> {
        let mut text = String::new();
        for id in seq.content() {
            text.push_str(self.symbol_of(id)?);
        }
        self.parse_numeral(&text)
    }
}

fn digit_symbols(base: u32) -> impl Iterator<Item = String> {
    DIGITS[..base as usize].iter().map(|&b| (b as char).to_string())
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::DecimalAddition => write!(f, "decimal_addition"),
            TaskKind::NbaseAddition { base } => write!(f, "nbase_addition({base})"),
            TaskKind::BinopTable { modulus } => write!(f, "binop_table({modulus})"),
        }
    }
}

/// Small helper for tests and generators: numeral digit count in `base`.
pub fn digit_count(value: &BigUint, base: u32) -> usize {
    if value.is_zero() {
        1
    } else {
        value.to_radix_be(base).len()
    }
}

/// `u64` view of a value when it fits.
pub fn small(value: &BigUint) -> Option<u64> {
    value.to_u64()
}
