//! The `msdf` command line: data preparation, training, pool generation,
//! reranking, evaluation and the chat service.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msdf_text::Task;

pub mod files;
pub mod infer;
pub mod records;
pub mod service;
pub mod train;

#[derive(Parser, Debug)]
#[command(name = "msdf", version, about = "Multi-source dialog generation with a consistency selector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Turn raw samples into encoder-ready records.
    Preprocess(PreprocessArgs),
    /// Train a history-only generator on multi-turn dialogs.
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained generator on one task.
    Finetune(FinetuneArgs),
    /// Sample a candidate pool for every input sample.
    Generate(GenerateArgs),
    /// Train the consistency selector.
    TrainSelector(TrainSelectorArgs),
    /// Score pools with the selector and keep the best candidate.
    Rerank(RerankArgs),
    /// Score final responses against references.
    Eval(EvalArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
    /// Talk to a running service from the terminal.
    Chat(ChatArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Samples shaped like the competition data (needs --task).
    Demo,
    /// Multi-turn chit-chat dialogs.
    Dialogs,
    /// Knowledge samples whose answer is an entity seen only in the knowledge.
    Copy,
    /// Random-response dialogs for memorization runs.
    Memorize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Entity pool size for the copy corpus.
    #[arg(long, default_value_t = 50)]
    pub entities: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pipeline settings (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds the persona filter.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop samples that fail preprocessing instead of stopping.
    #[arg(long)]
    pub skip_invalid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small models on one machine.
    Desk,
    /// The published full-size settings.
    Paper,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps (per phase, counted across resumes).
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, conflicts_with = "grad_clip")]
    pub no_clip: bool,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model shape (TOML).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also save the last parameters with optimizer state, for --resume.
    #[arg(long)]
    pub state_out: Option<PathBuf>,
    /// Continue from a checkpoint written by --state-out.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dialogs, one `{"turns": [...]}` per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Sample files whose text should also be in the vocabulary, so that
    /// later fine-tuning sees no unknown tokens.
    #[arg(long = "vocab-from")]
    pub vocab_from: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(long)]
    pub task: Task,
    /// Preprocessed samples of `--task`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Train without the copy head.
    #[arg(long)]
    pub no_copy: bool,
    /// Give knowledge and persona separate encoders in the recommendation task.
    #[arg(long)]
    pub separate_encoders: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct DecodingArgs {
    #[arg(long, default_value_t = 10)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 8)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 48)]
    pub max_new_tokens: usize,
    /// Sample `i` is decoded with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw samples.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decoding: DecodingArgs,
}

#[derive(Args, Debug)]
pub struct TrainSelectorArgs {
    /// Raw samples with responses.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Negatives per positive.
    #[arg(long, default_value_t = 1)]
    pub neg_ratio: usize,
    /// Accept a corpus mixing several tasks.
    #[arg(long)]
    pub joint: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    #[arg(long)]
    pub selector: PathBuf,
    #[arg(long)]
    pub pools: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Lines with a `response` field, aligned with the references.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Raw samples with responses.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// One fine-tuned generator per task.
    #[arg(long = "generator", required = true)]
    pub generators: Vec<PathBuf>,
    #[arg(long)]
    pub selector: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub journal_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Concurrent generation jobs.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
    #[arg(long)]
    pub task: Task,
    /// JSON object with knowledge, persona, user_profile, situation, goal.
    #[arg(long)]
    pub context: Option<PathBuf>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => infer::synth(&a),
        Command::Preprocess(a) => infer::preprocess(&a),
        Command::Pretrain(a) => train::pretrain(&a),
        Command::Finetune(a) => train::finetune(&a),
        Command::Generate(a) => infer::generate(&a),
        Command::TrainSelector(a) => train::train_selector(&a),
        Command::Rerank(a) => infer::rerank(&a),
        Command::Eval(a) => infer::eval(&a).map(|_| ()),
        Command::Serve(a) => service::serve(&a),
        Command::Chat(a) => service::chat(&a),
    }
}
