use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "tek",
    version,
    about = "Entity-anchored background retrieval, input packing and span-extraction QA training",
    propagate_version = true
)]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence over it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Directory receiving all artifacts and the run manifest
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Maximum number of worker threads
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,

    /// Seed for every random choice (masking, initialization, batching)
    #[arg(long, global = true, value_name = "S", value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,

    /// Log more (repeat for debug output)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus-jsonl file and write the index and vocabulary
    Ingest(CorpusArgs),
    /// Rank and fit backgrounds for JSONL queries read from stdin
    Retrieve(RetrieveArgs),
    /// Pack QA records or corpus blocks into fixed-length inputs
    Pack(PackCmd),
    /// Pack corpus blocks and apply span masking
    Mask(MaskCmd),
    /// Masked-language-model pretraining on background-augmented blocks
    Pretrain(PretrainCmd),
    /// Train the span-extraction heads and encoder on QA records
    Finetune(FinetuneCmd),
    /// Write per-question predictions
    Predict(EvalCmd),
    /// Write predictions and an EM/F1 metrics report
    Evaluate(EvalCmd),
    /// Evaluate a fixed model across context/background budget splits
    Ablate(AblateCmd),
    /// Generate the synthetic entity corpus and QA benchmark
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Qa,
    Pretrain,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus as corpus-jsonl or a saved index JSON
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,

    /// Vocabulary size cap, including special tokens
    #[arg(long, value_name = "N")]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// Context budget N_C (CLS, question, passage and their SEPs)
    #[arg(long, value_name = "N")]
    pub nc: Option<usize>,

    /// Background budget N_B
    #[arg(long, value_name = "N")]
    pub nb: Option<usize>,

    /// Sliding-window stride in passage tokens
    #[arg(long, value_name = "N")]
    pub stride: Option<usize>,

    /// Total input length; must equal N_C + N_B
    #[arg(long, value_name = "N")]
    pub total_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Fraction of maskable tokens to mask
    #[arg(long, value_name = "F")]
    pub rate: Option<f64>,

    /// Success probability of the span-length geometric distribution
    #[arg(long, value_name = "P")]
    pub geom_p: Option<f64>,

    /// Longest span length
    #[arg(long, value_name = "N")]
    pub max_span: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Number of optimizer steps
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,

    /// Passes over the data (finetuning); overrides --steps
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,

    /// Examples per step
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,

    /// Peak learning rate
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,

    /// Warmup steps (default: 5% of the total)
    #[arg(long, value_name = "N")]
    pub warmup: Option<usize>,

    /// Write a checkpoint every N steps
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Transformer layers
    #[arg(long, value_name = "N")]
    pub layers: Option<usize>,

    /// Attention heads per layer
    #[arg(long, value_name = "N")]
    pub heads: Option<usize>,

    /// Hidden size
    #[arg(long, value_name = "N")]
    pub hidden: Option<usize>,

    /// Feed-forward inner size
    #[arg(long, value_name = "N")]
    pub ffn: Option<usize>,

    /// Dropout rate during training
    #[arg(long, value_name = "F")]
    pub dropout: Option<f64>,

    /// Start from this checkpoint instead of random initialization
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// Query kind: qa lines are QA records, pretrain lines are {"page_id": ...}
    #[arg(long, value_enum, value_name = "MODE")]
    pub mode: Option<ModeArg>,

    /// Background token budget
    #[arg(long, value_name = "N")]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PackCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// QA records (JSONL), required in qa mode
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,

    /// Pack QA records or corpus blocks
    #[arg(long, value_enum, value_name = "MODE")]
    pub mode: Option<ModeArg>,

    #[command(flatten)]
    pub pack: PackArgs,
}

#[derive(Debug, Args)]
pub struct MaskCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    #[command(flatten)]
    pub pack: PackArgs,

    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Debug, Args)]
pub struct PretrainCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    #[command(flatten)]
    pub pack: PackArgs,

    #[command(flatten)]
    pub mask: MaskArgs,

    #[command(flatten)]
    pub train: TrainArgs,

    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// QA training records (JSONL)
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,

    #[command(flatten)]
    pub pack: PackArgs,

    #[command(flatten)]
    pub train: TrainArgs,

    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// QA records (JSONL)
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,

    /// Trained model checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    #[command(flatten)]
    pub pack: PackArgs,
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// QA records (JSONL)
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,

    /// Trained model checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Stride cap; each configuration uses min(stride, N_C / 2)
    #[arg(long, value_name = "N")]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Entities whose questions go to the training split
    #[arg(long, value_name = "N")]
    pub train_entities: Option<usize>,

    /// Entities whose questions go to the dev split
    #[arg(long, value_name = "N")]
    pub dev_entities: Option<usize>,

    /// Training questions
    #[arg(long, value_name = "N")]
    pub train_questions: Option<usize>,

    /// Dev questions
    #[arg(long, value_name = "N")]
    pub dev_questions: Option<usize>,

    /// Entities listed per passage
    #[arg(long, value_name = "N")]
    pub candidates: Option<usize>,
}
