mod commands;
mod lines;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use locseq_core::codec::{ParseMode, SequenceOrder};
use locseq_core::dataset::{CategorySetMode, Scenario};

/// Exit code 2 marks a usage error; every other failure is a data error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(name = "locseq", version, about = "Localization sequence tooling: codec, scoring, evaluation, dataset building")]
struct Cli {
    /// Worker threads (0 picks one per core). Outputs do not depend on it.
    #[arg(long, global = true, env = "LOCSEQ_WORKERS", default_value_t = 0)]
    workers: usize,

    /// Where to write the run manifest [default: next to the main output]
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detection records (JSON Lines) to sequences.
    Encode(EncodeArgs),
    /// Sequences to detection records.
    Decode(DecodeArgs),
    /// Token traces to ranked, scored detection records.
    Score(ScoreArgs),
    /// Evaluate predictions against ground truth.
    Eval(EvalArgs),
    /// Build a scenario dataset from source annotations.
    Build(BuildArgs),
    /// Generate a synthetic ground-truth and trace bundle.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    LabelFirst,
    CoordFirst,
}

impl From<OrderArg> for SequenceOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::LabelFirst => SequenceOrder::LabelFirst,
            OrderArg::CoordFirst => SequenceOrder::CoordFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Strict,
    Lenient,
}

impl From<ModeArg> for ParseMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strict => ParseMode::Strict,
            ModeArg::Lenient => ParseMode::Lenient,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    /// Detection records, one JSON object per line
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "label-first")]
    order: OrderArg,
    /// Write bare sequences instead of JSON records
    #[arg(long)]
    text: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    /// Sequence records (JSON) or bare sequences, one per line
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Overrides the order stored in each record
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    #[arg(long, value_enum, default_value = "strict")]
    mode: ModeArg,
    /// Lenient-mode diagnostics [default: <output>.diagnostics.jsonl]
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1]"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// Trace records: image_id, instruction, tokens [{text, prob}]
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "label-first")]
    order: OrderArg,
    /// Weight of the label score in the geometric mean
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    q: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_label: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_loc: bool,
    /// Score given to every detection when both scores are off
    #[arg(long, default_value_t = 0.99, value_parser = probability)]
    default_score: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Det,
    Rec,
    Ground,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    task: Task,
    /// Detection records with normalized boxes
    #[arg(long, short)]
    predictions: PathBuf,
    /// Ground-truth images, one JSON object per line
    #[arg(long, short)]
    ground_truth: PathBuf,
    /// Machine-readable report
    #[arg(long, short)]
    report: PathBuf,
    /// Score for predictions that carry none
    #[arg(long, default_value_t = 0.99, value_parser = probability)]
    default_score: f64,
    /// IoU for a REC or grounding hit
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    threshold: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioArg {
    #[value(alias = "single")]
    SingleReferent,
    #[value(alias = "multi")]
    OneCategoryMulti,
    #[value(alias = "none")]
    NonExisting,
    #[value(alias = "multi-category")]
    MultiCategoryMulti,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::SingleReferent => Scenario::SingleReferent,
            ScenarioArg::OneCategoryMulti => Scenario::OneCategoryMulti,
            ScenarioArg::NonExisting => Scenario::NonExisting,
            ScenarioArg::MultiCategoryMulti => Scenario::MultiCategoryMulti,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CategorySetArg {
    PerImage,
    DatasetWide,
}

impl From<CategorySetArg> for CategorySetMode {
    fn from(c: CategorySetArg) -> Self {
        match c {
            CategorySetArg::PerImage => CategorySetMode::PerImage,
            CategorySetArg::DatasetWide => CategorySetMode::DatasetWide,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BuildArgs {
    /// Source records, one JSON object per line
    #[arg(long, short)]
    sources: PathBuf,
    /// Directory holding <scenario>.txt template files
    #[arg(long, short)]
    templates: PathBuf,
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: PathBuf,
    /// Dropped and skipped records [default: <output>.dropped.jsonl]
    #[arg(long)]
    dropped: Option<PathBuf>,
    /// Attribute lexicon (JSON) for composed negatives
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Composed negatives per non-existing record
    #[arg(long, default_value_t = 0, requires = "lexicon")]
    composed_negatives: usize,
    #[arg(long, value_enum, default_value = "per-image")]
    category_set: CategorySetArg,
    #[arg(long)]
    max_categories: Option<usize>,
    #[arg(long)]
    max_templates: Option<usize>,
    /// Subsample large-object samples 1:1 against small and medium ones
    #[arg(long)]
    balance_large: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Synthetic configuration (JSON); missing fields take defaults
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        eprintln!("error: cannot start workers: {e}");
        return ExitCode::from(1);
    }
    let manifest = cli.manifest.as_deref();
    let result = match &cli.command {
        Command::Encode(a) => commands::encode(a, manifest),
        Command::Decode(a) => commands::decode(a, manifest),
        Command::Score(a) => commands::score(a, manifest),
        Command::Eval(a) => commands::eval(a, manifest),
        Command::Build(a) => commands::build(a, manifest),
        Command::Synth(a) => commands::synth(a, manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
