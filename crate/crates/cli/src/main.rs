mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ssmqa", version, about = "State-space question answering for Hindi and Marathi")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a grapheme-cluster vocabulary.
    Vocab(VocabArgs),
    /// Align answers to tokens and write model-ready records.
    Preprocess(PreprocessArgs),
    /// Length statistics and correlation tables.
    Stats(StatsArgs),
    /// Write a seeded synthetic QA corpus.
    Synth(SynthArgs),
    /// LoRA fine-tuning with checkpoints and a JSONL log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Answer one question about one context.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    /// Text files (one passage per line) or `{"data": [...]}` JSON datasets.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Target vocabulary size, including the five reserved entries.
    #[arg(long, value_parser = clap::value_parser!(u64).range(5..))]
    pub size: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Leave the built-in template wording out of the training text.
    #[arg(long)]
    pub no_template_text: bool,
    /// Keep only JSON records in this language, for a per-language vocabulary.
    #[arg(long)]
    pub lang: Option<String>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2048)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_fillers_before: usize,
    #[arg(long, default_value_t = 2)]
    pub max_fillers_after: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out records for validation loss and the `best` checkpoint.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "mamba")]
    pub preset: String,
    /// Training configuration JSON; replaces the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model configuration JSON; defaults to the preset's toy-scale model.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Existing vocabulary; otherwise one is trained on the data.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    /// Chat template JSON for the language-modelling objective.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Span,
    Generate,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `report.json`, `report.csv` and `report_corpus.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `span` when the checkpoint has a span head.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Add per-sample ROUGE-1 and ROUGE-2 columns.
    #[arg(long)]
    pub rouge_n: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub context: String,
    /// Worked examples placed before the question.
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    /// Dataset supplying the worked examples, first records first.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Number of sampled candidates.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prompt template file with [system], [example] and [prompt] sections.
    #[arg(long)]
    pub prompt_template: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Also write the result as JSON, with a run manifest beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the selection score and every candidate.
    #[arg(long)]
    pub verbose: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Vocab(a) => commands::vocab(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
