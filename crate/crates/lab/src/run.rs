//! Multi-trial training runs and their on-disk layout:
//!
//! ```text
//! run/
//!   config.json          resolved experiment config, written first
//!   dataset.json         dataset spec and file hashes
//!   trial_00/metrics.csv epoch,train_loss,val_em
//!   trial_00/best.ckpt   weights of the best validation epoch
//!   trial_00/record.json
//!   summary.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use addlab_core::models::{Architecture, MlpConfig, Model, ModelConfig};
use addlab_core::taskgen::EquationExample;
use addlab_core::train::{self, AdamConfig, EpochMetrics, MeanSd, TrainConfig, TrialData, TrialObserver, TrialRecord};
use addlab_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{self, DatasetSpec, LoadedDataset};
use crate::error::{LabError, Result};
use crate::fsutil;

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub trials: usize,
    pub parallel: usize,
    /// Train on only the first `n` training examples.
    pub train_limit: Option<usize>,
}

/// A config file before defaults: any subset of [`ExperimentConfig`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub data: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub adam: Option<AdamConfig>,
    pub trials: Option<usize>,
    pub parallel: Option<usize>,
    pub train_limit: Option<usize>,
}

/// Individual command-line overrides, applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub arch: Option<Architecture>,
    pub data: Option<PathBuf>,
    pub trials: Option<usize>,
    pub parallel: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub train_limit: Option<usize>,
}

pub const DEFAULT_TRIALS: usize = 10;

impl ExperimentConfig {
    pub fn resolve(file: PartialConfig, o: Overrides) -> std::result::Result<Self, String> {
        let model = match (o.arch, file.model) {
            (Some(arch), Some(m)) if m.architecture() == arch => m,
            (Some(arch), _) => ModelConfig::default_for(arch),
            (None, Some(m)) => m,
            (None, None) => return Err("no architecture: pass --arch or a config with a \"model\" section".into()),
        };
        let arch = model.architecture();
        let data = o.data.or(file.data).ok_or("no dataset: pass --data or set \"data\" in the config")?;
        let mut train = file.train.unwrap_or_default();
        if let Some(v) = o.epochs {
            train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = o.seed {
            train.seed = v;
        }
        let mut adam = file.adam.unwrap_or_else(|| AdamConfig::for_architecture(arch));
        if let Some(lr) = o.lr {
            adam.lr = lr;
        }
        let cfg = ExperimentConfig {
            data,
            model,
            train,
            adam,
            trials: o.trials.or(file.trials).unwrap_or(DEFAULT_TRIALS),
            parallel: o.parallel.or(file.parallel).unwrap_or(1),
            train_limit: o.train_limit.or(file.train_limit),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.trials == 0 {
            return Err("trials must be at least 1".into());
        }
        if self.parallel == 0 {
            return Err("parallel must be at least 1".into());
        }
        if self.train_limit == Some(0) {
            return Err("train_limit must be at least 1".into());
        }
        self.train.validate().map_err(|e| e.to_string())?;
        self.adam.validate().map_err(|e| e.to_string())
    }
}

/// Widens the MLP's fixed input/output lengths to fit every example.
pub fn fit_mlp(config: &mut ModelConfig, vocab: &Vocabulary, data: &LoadedDataset) -> Result<bool> {
    let ModelConfig::Mlp(c) = config else { return Ok(false) };
    let (mut input, mut output) = (0, 0);
    for e in data.train.iter().chain(&data.val).chain(&data.test) {
        input = input.max(vocab.encode(&e.input_text)?.len());
        output = output.max(vocab.encode(&e.answer_text)?.len() + 1);
    }
    let fitted = MlpConfig { input_len: c.input_len.max(input), output_len: c.output_len.max(output), ..c.clone() };
    let changed = fitted != *c;
    *c = fitted;
    Ok(changed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dir: PathBuf,
    pub spec: DatasetSpec,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub architecture: Architecture,
    pub param_count: usize,
    pub trials: usize,
    pub completed: usize,
    pub failed: usize,
    pub val_em: Option<MeanSd>,
    pub test_em: Option<MeanSd>,
    pub records: Vec<TrialRecord>,
}

pub fn trial_dir_name(i: usize) -> String {
    format!("trial_{i:02}")
}

struct TrialFiles {
    index: usize,
    dir: PathBuf,
    metrics: fs::File,
    error: Option<LabError>,
}

impl TrialFiles {
    fn create(run_dir: &Path, index: usize) -> Result<Self> {
        let dir = run_dir.join(trial_dir_name(index));
        fs::create_dir_all(&dir).map_err(LabError::io(&dir))?;
        let path = dir.join(METRICS_FILE);
        let mut metrics = fs::File::create(&path).map_err(LabError::io(&path))?;
        writeln!(metrics, "epoch,train_loss,val_em").map_err(LabError::io(&path))?;
        Ok(Self { index, dir, metrics, error: None })
    }
}

impl TrialObserver for TrialFiles {
    fn on_epoch(&mut self, m: &EpochMetrics, model: &Model, improved: bool) {
        eprintln!("trial {:02} epoch {:3} loss {:.4} val_em {:6.2}{}", self.index, m.epoch, m.train_loss, m.val_em, if improved { " *" } else { "" });
        let path = self.dir.join(METRICS_FILE);
        let written = writeln!(self.metrics, "{},{},{}", m.epoch, m.train_loss, m.val_em).and_then(|_| self.metrics.flush());
        if let Err(e) = written {
            self.error.get_or_insert(LabError::Io { path, source: e });
        }
        if improved {
            if let Err(e) = checkpoint::save(model, &self.dir.join(CHECKPOINT_FILE)) {
                self.error.get_or_insert(e);
            }
        }
    }
}

fn run_one(cfg: &ExperimentConfig, vocab: &Vocabulary, data: TrialData<'_>, run_dir: &Path, index: usize) -> Result<TrialRecord> {
    let seed = cfg.train.seed + index as u64;
    let mut files = TrialFiles::create(run_dir, index)?;
    let mut model = Model::new(&cfg.model, vocab.clone(), seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let mut record = train::train_trial(&mut model, data, &train_cfg, &cfg.adam, &mut files)?;
    if let Some(e) = files.error.take() {
        return Err(e);
    }
    if record.best_epoch.is_some() {
        record.best_checkpoint = Some(format!("{}/{CHECKPOINT_FILE}", trial_dir_name(index)));
    }
    fsutil::write_json(&files.dir.join(RECORD_FILE), &record)?;
    Ok(record)
}

/// Trains `cfg.trials` models, `cfg.parallel` at a time. Trial `i` uses seed
/// `cfg.train.seed + i` regardless of scheduling.
pub fn run_experiment(mut cfg: ExperimentConfig, out: &Path, force: bool) -> Result<RunSummary> {
    cfg.validate().map_err(LabError::Invalid)?;
    let data = dataset::load(&cfg.data)?;
    if data.val.is_empty() {
        return Err(LabError::Invalid(format!("{} has no validation split", cfg.data.display())));
    }
    let vocab = data.vocab.clone();
    if fit_mlp(&mut cfg.model, &vocab, &data)? {
        eprintln!("widened MLP lengths to fit the dataset: {:?}", cfg.model);
    }
    let param_count = Model::new(&cfg.model, vocab.clone(), 0)?.param_count();

    fsutil::prepare_out_dir(out, force)?;
    fsutil::write_json(&out.join(CONFIG_FILE), &cfg)?;
    let info = DatasetInfo { dir: cfg.data.clone(), spec: data.spec.clone(), hashes: dataset::hashes(&cfg.data)? };
    fsutil::write_json(&out.join(DATASET_FILE), &info)?;

    let train_set: &[EquationExample] = match cfg.train_limit {
        Some(n) => &data.train[..n.min(data.train.len())],
        None => &data.train,
    };
    let trial_data = TrialData { train: train_set, val: &data.val, test: &data.test };
    eprintln!(
        "{}: {} params, {} trials ({} parallel), {} train / {} val / {} test",
        cfg.model.architecture(),
        param_count,
        cfg.trials,
        cfg.parallel,
        train_set.len(),
        data.val.len(),
        data.test.len()
    );

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrialRecord>>>> = Mutex::new((0..cfg.trials).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..cfg.parallel.min(cfg.trials) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cfg.trials {
                    break;
                }
                let r = run_one(&cfg, &vocab, trial_data, out, i);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let records = results.into_inner().unwrap().into_iter().map(|r| r.expect("every trial ran")).collect::<Result<Vec<_>>>()?;

    let s = train::summarize(&records);
    let summary = RunSummary {
        architecture: cfg.model.architecture(),
        param_count,
        trials: records.len(),
        completed: s.completed,
        failed: s.failed,
        val_em: s.val_em,
        test_em: s.test_em,
        records,
    };
    fsutil::write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn load_summary(run_dir: &Path) -> Result<RunSummary> {
    fsutil::read_json(&run_dir.join(SUMMARY_FILE))
}

pub fn load_config(run_dir: &Path) -> Result<ExperimentConfig> {
    fsutil::read_json(&run_dir.join(CONFIG_FILE))
}

/// Checkpoint of the completed trial with the highest validation EM
/// (earliest trial on ties).
pub fn best_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let summary = load_summary(run_dir)?;
    let mut best: Option<(f64, &str)> = None;
    for r in summary.records.iter().filter(|r| r.completed()) {
        if let (Some(v), Some(c)) = (r.best_val_em, r.best_checkpoint.as_deref()) {
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, c));
            }
        }
    }
    let (_, rel) = best.ok_or_else(|| LabError::format(&run_dir.join(SUMMARY_FILE), "no completed trial with a checkpoint"))?;
    Ok(run_dir.join(rel))
}
