//! `addlab` command line. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use addlab_core::eval::{self, Taxonomy};
use addlab_core::models::Architecture;
use addlab_core::probe::{render_prompts, SamplingParams};
use addlab_core::taskgen::{self, BinOp, BinOpTableSpec, PolyTerm, Split, SplitSpec};
use addlab_core::vocab::{TaskKind, Vocabulary};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::LabError;
use crate::probe::{HttpCompleter, LiveOptions, RetryPolicy};
use crate::run::{ExperimentConfig, Overrides, PartialConfig};
use crate::{checkpoint, dataset, fsutil, probe, report, run};

#[derive(Debug, Parser)]
#[command(name = "addlab", version, about = "Arithmetic extrapolation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset.
    Gen(GenArgs),
    /// Train one architecture for several trials.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write plot data.
    Eval(EvalArgs),
    /// Summarize one or more runs as a results table.
    Report(ReportArgs),
    /// Probe a completion endpoint with large-digit additions.
    Probe(ProbeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskName {
    SmallDigit,
    LargerSmallDigit,
    Nbase,
    Binop,
    LargeDigit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpName {
    Add,
    Sub,
    Poly,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub task: TaskName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Numeral base for `nbase`.
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=36))]
    pub base: Option<u32>,
    /// Modulus for `binop`.
    #[arg(long, default_value_t = 97, value_parser = clap::value_parser!(u32).range(2..))]
    pub modulus: u32,
    #[arg(long, value_enum, default_value_t = OpName::Add)]
    pub op: OpName,
    /// Polynomial terms for `--op poly` as `coef:a_pow:b_pow`, comma separated.
    #[arg(long)]
    pub terms: Option<String>,
    /// Fraction of the `binop` table used for training.
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    /// Pair count for `large-digit`.
    #[arg(long, default_value_t = 100_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub max_digits: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; individual flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<Architecture>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Trials run concurrently.
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base seed; trial `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use only the first N training examples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "run", required_unless_present = "run")]
    pub checkpoint: Option<PathBuf>,
    /// Run directory; evaluates its best trial.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Dataset directory; defaults to the run's dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write table.txt and table.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Live,
    Replay,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum, default_value_t = Mode::Replay)]
    pub mode: Mode,
    /// Recorded completions for replay.
    #[arg(long, required_if_eq("mode", "replay"))]
    pub fixture: Option<PathBuf>,
    /// Completion URL; falls back to the ADDLAB_ENDPOINT environment variable.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub max_digits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Requests in flight.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 5)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 500)]
    pub initial_backoff_ms: u64,
    #[arg(long, default_value_t = 30_000)]
    pub max_backoff_ms: u64,
    /// Minimum milliseconds between request starts.
    #[arg(long, default_value_t = 0)]
    pub min_interval_ms: u64,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
    /// Keep every sample in the raw log, not just the first.
    #[arg(long)]
    pub record_all_samples: bool,
    #[arg(long, default_value_t = SamplingParams::default().maximum_tokens)]
    pub maximum_tokens: u32,
    #[arg(long, default_value_t = SamplingParams::default().temperature)]
    pub temperature: f64,
    #[arg(long, default_value_t = SamplingParams::default().top_p)]
    pub top_p: f64,
    #[arg(long, default_value_t = SamplingParams::default().top_k)]
    pub top_k: u32,
    #[arg(long, default_value_t = SamplingParams::default().n_samples)]
    pub n_samples: u32,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(LabError),
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Report(a) => report_cmd(a),
        Command::Probe(a) => probe_cmd(a),
    }
}

fn parse_terms(text: &str) -> Result<Vec<PolyTerm>, String> {
    text.split(',')
        .map(|t| {
            let parts: Vec<&str> = t.trim().split(':').collect();
            let bad = || format!("bad polynomial term {t:?}; expected coef:a_pow:b_pow");
            let [c, a, b] = parts.as_slice() else { return Err(bad()) };
            Ok(PolyTerm { coef: c.parse().map_err(|_| bad())?, a_pow: a.parse().map_err(|_| bad())?, b_pow: b.parse().map_err(|_| bad())? })
        })
        .collect()
}

fn gen(a: GenArgs) -> CliResult {
    let (splits, kind) = match a.task {
        TaskName::SmallDigit => (taskgen::gen_small_digit(a.seed), TaskKind::DecimalAddition),
        TaskName::LargerSmallDigit => (taskgen::gen_larger_small_digit(a.seed), TaskKind::DecimalAddition),
        TaskName::Nbase => {
            let base = a.base.ok_or_else(|| CliError::Usage("--task nbase needs --base".into()))?;
            let splits = taskgen::gen_nbase(base, &SplitSpec::small_digit(a.seed)).map_err(|e| CliError::Usage(e.to_string()))?;
            (splits, TaskKind::NbaseAddition { base })
        }
        TaskName::Binop => {
            let op = match (a.op, &a.terms) {
                (OpName::Add, None) => BinOp::Add,
                (OpName::Sub, None) => BinOp::Sub,
                (OpName::Poly, Some(t)) => BinOp::Polynomial { terms: parse_terms(t).map_err(CliError::Usage)? },
                (OpName::Poly, None) => return Err(CliError::Usage("--op poly needs --terms".into())),
                (_, Some(_)) => return Err(CliError::Usage("--terms only applies to --op poly".into())),
            };
            let spec = BinOpTableSpec { modulus: a.modulus, op, train_fraction: a.train_fraction, seed: a.seed };
            let splits = taskgen::gen_binop_table(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
            (splits, TaskKind::BinopTable { modulus: a.modulus })
        }
        TaskName::LargeDigit => {
            let pairs = taskgen::gen_large_digit_pairs(a.pairs, a.max_digits, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            dataset::write_pairs(&a.out, &pairs, a.max_digits, a.seed, a.force)?;
            eprintln!("wrote {} pairs to {}", pairs.len(), a.out.display());
            return Ok(());
        }
    };
    let vocab = Vocabulary::build(kind).map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = dataset::write_splits(&a.out, &splits, &vocab, a.force)?;
    eprintln!("wrote {:?} to {}", spec.splits, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let file: PartialConfig = match &a.config {
        Some(p) => fsutil::read_json(p)?,
        None => PartialConfig::default(),
    };
    let overrides = Overrides {
        arch: a.arch,
        data: a.data,
        trials: a.trials,
        parallel: a.parallel,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        lr: a.lr,
        train_limit: a.train_limit,
    };
    let cfg = ExperimentConfig::resolve(file, overrides).map_err(CliError::Usage)?;
    let summary = run::run_experiment(cfg, &a.out, a.force)?;
    eprint!("{}", report::render_table(&report::table_rows(&[summary])));
    Ok(())
}

fn split_of(s: SplitName) -> Split {
    match s {
        SplitName::Train => Split::Train,
        SplitName::Val => Split::Val,
        SplitName::Test => Split::Test,
    }
}

fn evaluate(a: EvalArgs) -> CliResult {
    let (ckpt, run_data) = match (&a.checkpoint, &a.run) {
        (Some(c), _) => (c.clone(), None),
        (None, Some(r)) => (run::best_checkpoint(r)?, Some(run::load_config(r)?.data)),
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --run".into())),
    };
    let data_dir = a.data.or(run_data).ok_or_else(|| CliError::Usage("--data is required with --checkpoint".into()))?;
    let model = checkpoint::load(&ckpt)?;
    let data = dataset::load(&data_dir)?;
    if data.vocab.to_file().symbols != model.vocab().symbols() {
        return Err(LabError::Invalid(format!("{} and {} use different vocabularies", ckpt.display(), data_dir.display())).into());
    }
    let split = split_of(a.split);
    let examples = data.split(split);
    if examples.is_empty() {
        return Err(LabError::Invalid(format!("{} has no {} split", data_dir.display(), split.name())).into());
    }
    fsutil::prepare_out_dir(&a.out, a.force)?;
    eprintln!("evaluating {} on {} {} examples", ckpt.display(), examples.len(), split.name());
    let records = eval::predict(&model, examples, a.batch_size).map_err(LabError::from)?;
    let taxonomy = Taxonomy { base: data.vocab.kind().base(), ..Taxonomy::default() };
    let rep = eval::EvalReport::from_records(records, taxonomy, a.top_k);
    let summary = report::write_eval(&a.out, split.name(), &rep, data.train_square())?;
    eprintln!("EM {:.2}%  taxonomy {:?}", summary.em_percent, summary.taxonomy);
    Ok(())
}

fn report_cmd(a: ReportArgs) -> CliResult {
    let summaries = a.runs.iter().map(|r| run::load_summary(r)).collect::<Result<Vec<_>, _>>()?;
    let rows = report::table_rows(&summaries);
    let text = report::render_table(&rows);
    print!("{text}");
    if let Some(out) = &a.out {
        fsutil::prepare_out_dir(out, a.force)?;
        fsutil::write_atomic(&out.join("table.txt"), text.as_bytes())?;
        report::write_table_csv(&out.join("table.csv"), &rows)?;
    }
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> CliResult {
    let params = SamplingParams {
        maximum_tokens: a.maximum_tokens,
        temperature: a.temperature,
        top_p: a.top_p,
        top_k: a.top_k,
        n_samples: a.n_samples,
    };
    params.validate().map_err(CliError::Usage)?;
    if a.concurrency == 0 {
        return Err(CliError::Usage("--concurrency must be at least 1".into()));
    }
    let pairs = taskgen::gen_large_digit_pairs(a.pairs, a.max_digits, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let prompts = render_prompts(&pairs);
    let responses = match a.mode {
        Mode::Replay => {
            let path = a.fixture.as_deref().ok_or_else(|| CliError::Usage("replay mode needs --fixture".into()))?;
            let records = probe::read_fixture(path)?;
            let responses = probe::replay(&prompts, &records, a.pairs).map_err(|m| LabError::format(path, m))?;
            fsutil::prepare_out_dir(&a.out, a.force)?;
            responses
        }
        Mode::Live => {
            let completer = HttpCompleter::from_env(a.endpoint.clone(), Duration::from_secs(a.timeout_secs)).map_err(CliError::Usage)?;
            fsutil::prepare_out_dir(&a.out, a.force)?;
            let opts = LiveOptions {
                concurrency: a.concurrency,
                retry: RetryPolicy {
                    max_retries: a.max_retries,
                    initial_delay: Duration::from_millis(a.initial_backoff_ms),
                    max_delay: Duration::from_millis(a.max_backoff_ms),
                },
                min_interval: Duration::from_millis(a.min_interval_ms),
                record_all_samples: a.record_all_samples,
            };
            probe::probe_live(&prompts, &completer, &params, &opts, &a.out.join(probe::RAW_FILE))?
        }
    };
    let summary = probe::write_outputs(&a.out, &responses)?;
    eprintln!(
        "{} responses ({} failed): correct {}, numerical incorrect {}, non-numerical {}",
        summary.responses, summary.failed, summary.counts.correct, summary.counts.numerical_incorrect, summary.counts.non_numerical
    );
    Ok(())
}

/// Parses and runs `args` (program name first) without exiting; for tests.
pub fn run_args<I, T>(args: I) -> Result<(), (u8, String)>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| (e.exit_code() as u8, e.to_string()))?;
    execute(cli).map_err(|e| (e.exit_code(), e.to_string()))
}

