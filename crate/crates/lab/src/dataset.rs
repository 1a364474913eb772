//! On-disk datasets: one JSON line per example plus `spec.json` and
//! `vocab.json` sidecars.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use addlab_core::rng::RNG_ALGORITHM;
use addlab_core::taskgen::{EquationExample, Interval, LargePair, Provenance, Split, Splits};
use addlab_core::vocab::{Vocabulary, VocabularyFile};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsutil;

pub const GENERATOR_VERSION: u32 = 1;
pub const SPEC_FILE: &str = "spec.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRow {
    pub a: String,
    pub b: String,
    pub c: String,
    pub input_text: String,
    pub answer_text: String,
}

impl From<&EquationExample> for DatasetRow {
    fn from(e: &EquationExample) -> Self {
        Self {
            a: e.a.to_string(),
            b: e.b.to_string(),
            c: e.c.to_string(),
            input_text: e.input_text.clone(),
            answer_text: e.answer_text.clone(),
        }
    }
}

impl DatasetRow {
    fn into_example(self, vocab: &Vocabulary) -> std::result::Result<EquationExample, String> {
        let num = |s: &str| s.parse::<BigUint>().map_err(|_| format!("not a decimal integer: {s:?}"));
        let e = EquationExample { a: num(&self.a)?, b: num(&self.b)?, c: num(&self.c)?, input_text: self.input_text, answer_text: self.answer_text };
        match e.reparse(vocab) {
            Some((a, b, c)) if a == e.a && b == e.b && c == e.c => Ok(e),
            _ => Err(format!("texts {:?} {:?} disagree with a={} b={} c={}", e.input_text, e.answer_text, e.a, e.b, e.c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator_version: u32,
    pub rng_algorithm: String,
    pub provenance: Provenance,
    pub splits: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub spec: DatasetSpec,
    pub vocab: Vocabulary,
    pub train: Vec<EquationExample>,
    /// Empty when the generator produced no validation split.
    pub val: Vec<EquationExample>,
    pub test: Vec<EquationExample>,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> &[EquationExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Operand square of the training distribution, for addition datasets.
    pub fn train_square(&self) -> Option<Interval> {
        match &self.spec.provenance {
            Provenance::Addition { spec, .. } => Some(spec.train_range),
            Provenance::BinopTable { .. } => None,
        }
    }
}

pub fn write_splits(dir: &Path, splits: &Splits, vocab: &Vocabulary, force: bool) -> Result<DatasetSpec> {
    fsutil::prepare_out_dir(dir, force)?;
    let mut sizes = BTreeMap::new();
    let mut parts = vec![&splits.train, &splits.test];
    if let Some(val) = &splits.val {
        parts.push(val);
    }
    for d in parts {
        fsutil::write_jsonl(&dir.join(split_file(d.split)), d.examples.iter().map(DatasetRow::from))?;
        sizes.insert(d.split.name().to_string(), d.len());
    }
    let spec = DatasetSpec {
        generator_version: GENERATOR_VERSION,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        provenance: splits.train.provenance.clone(),
        splits: sizes,
    };
    fsutil::write_json(&dir.join(VOCAB_FILE), &vocab.to_file())?;
    fsutil::write_json(&dir.join(SPEC_FILE), &spec)?;
    Ok(spec)
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let file: VocabularyFile = fsutil::read_json(path)?;
    Vocabulary::from_file(file).map_err(|e| LabError::format(path, e))
}

fn load_split(dir: &Path, split: Split, vocab: &Vocabulary, expected: Option<usize>) -> Result<Vec<EquationExample>> {
    let path = dir.join(split_file(split));
    let rows: Vec<DatasetRow> = fsutil::read_jsonl(&path)?;
    if let Some(n) = expected {
        if rows.len() != n {
            return Err(LabError::format(&path, format!("{} rows, spec says {n}", rows.len())));
        }
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| r.into_example(vocab).map_err(|m| LabError::format(&path, format!("line {}: {m}", i + 1))))
        .collect()
}

pub fn load(dir: &Path) -> Result<LoadedDataset> {
    if !dir.is_dir() {
        return Err(LabError::Missing(dir.to_path_buf()));
    }
    let spec: DatasetSpec = fsutil::read_json(&dir.join(SPEC_FILE))?;
    let vocab = load_vocab(&dir.join(VOCAB_FILE))?;
    let size = |s: Split| spec.splits.get(s.name()).copied();
    let train = load_split(dir, Split::Train, &vocab, size(Split::Train))?;
    let test = load_split(dir, Split::Test, &vocab, size(Split::Test))?;
    let val = match size(Split::Val) {
        Some(n) => load_split(dir, Split::Val, &vocab, Some(n))?,
        None => Vec::new(),
    };
    Ok(LoadedDataset { dir: dir.to_path_buf(), spec, vocab, train, val, test })
}

/// sha256 of every dataset file present in `dir`, keyed by file name.
pub fn hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut names: Vec<String> = [Split::Train, Split::Val, Split::Test].into_iter().map(split_file).collect();
    names.extend([SPEC_FILE, VOCAB_FILE, PAIRS_FILE].map(String::from));
    for name in names {
        let path = dir.join(&name);
        if path.exists() {
            out.insert(name, fsutil::sha256_file(&path)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRow {
    pub a: String,
    pub b: String,
    pub c: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairsSpec {
    pub generator_version: u32,
    pub rng_algorithm: String,
    pub generator: String,
    pub n_pairs: usize,
    pub max_digits: usize,
    pub seed: u64,
}

pub fn write_pairs(dir: &Path, pairs: &[LargePair], max_digits: usize, seed: u64, force: bool) -> Result<PairsSpec> {
    fsutil::prepare_out_dir(dir, force)?;
    let rows = pairs.iter().map(|p| PairRow { a: p.a.to_string(), b: p.b.to_string(), c: p.c.to_string() });
    fsutil::write_jsonl(&dir.join(PAIRS_FILE), rows)?;
    let spec = PairsSpec {
        generator_version: GENERATOR_VERSION,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        generator: "large_digit".into(),
        n_pairs: pairs.len(),
        max_digits,
        seed,
    };
    fsutil::write_json(&dir.join(SPEC_FILE), &spec)?;
    Ok(spec)
}
