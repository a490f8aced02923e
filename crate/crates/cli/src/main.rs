//! `phead`: pretrain a frozen base, train and serve per-user personalization
//! heads, and run the size/data/epoch sweeps.

mod commands;
mod config;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "phead", version, about = "Personalization heads over a shared frozen base")]
struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Registry root holding base.pibm and users/.
    #[arg(long, global = true, env = "PH_REGISTRY_ROOT")]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a base by masked language modeling and freeze it into the registry.
    Pretrain(PretrainArgs),
    /// Train a head for one user and store it as the user's next version.
    Train(TrainArgs),
    /// Score a user's head on a dataset's test split.
    Eval(EvalArgs),
    /// Classify one text with a user's head.
    Predict(PredictArgs),
    /// Cross-product of head sizes, data amounts, epochs and seeds, as CSV.
    Sweep(SweepArgs),
    /// The data-vs-epochs protocol with its differential matrices.
    Grid(SweepArgs),
    /// Parameter, storage and efficiency arithmetic for N users.
    CostReport(CostArgs),
    /// Convert the SNIPS benchmark directory layout to JSONL.
    ConvertSnips(ConvertArgs),
    /// Convert CLINC150 data_full.json to JSONL.
    ConvertClinc(ClincArgs),
    /// Write the generated toy intent dataset and pretraining corpus.
    GenToy(GenToyArgs),
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Text file with one sentence per line, or a JSONL dataset.
    #[arg(long)]
    corpus: PathBuf,
    /// Write the base here instead of <root>/base.pibm.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the loss curve and config as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct HeadFlags {
    /// Head feed-forward width.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Attention heads in the head block.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// False pairs per example (0 = true pairs only).
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    user: String,
    /// JSONL dataset; its train split is used.
    #[arg(long)]
    data: PathBuf,
    /// Subsample this many training examples per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[command(flatten)]
    head: HeadFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Also write the training report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    user: String,
    #[arg(long)]
    data: PathBuf,
    /// Head version; latest by default.
    #[arg(long)]
    version: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    user: String,
    #[arg(long)]
    text: String,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',', required_unless_present = "data")]
    classes: Vec<String>,
    /// Take the class list from this dataset instead.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    /// Per-class training counts, ascending.
    #[arg(long, value_delimiter = ',')]
    per_class: Option<Vec<usize>>,
    /// Epoch checkpoints, ascending; training continues between them.
    #[arg(long = "epochs", value_delimiter = ',')]
    epoch_checkpoints: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Cells run in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the Markdown matrices here.
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
pub struct CostArgs {
    /// Take the base size, head size and user count from the registry.
    #[arg(long)]
    from_registry: bool,
    #[arg(long, default_value_t = 109_000_000)]
    base_params: u64,
    #[arg(long, default_value_t = 768)]
    d_model: usize,
    /// Head sizes listed in the table; the first sets the per-user head.
    #[arg(long, value_delimiter = ',', default_values_t = [2048, 1024, 512, 256, 128])]
    hidden_dims: Vec<usize>,
    /// Per-user head parameters; defaults to the first hidden dim's count.
    #[arg(long)]
    head_params: Option<u64>,
    #[arg(long)]
    users: Option<u64>,
    /// Candidate for efficiency: F,training_cost,size_bytes.
    #[arg(long, value_delimiter = ',')]
    pe_candidate: Option<Vec<f64>>,
    /// Reference for efficiency: F,training_cost,size_bytes.
    #[arg(long, value_delimiter = ',')]
    pe_reference: Option<Vec<f64>>,
    /// Bytes of data a user produces per day.
    #[arg(long)]
    daily_bytes: Option<f64>,
    #[arg(long)]
    days: Option<f64>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct ClincArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep the out-of-scope examples as their own class.
    #[arg(long)]
    include_oos: bool,
}

#[derive(Args)]
pub struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 30)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write an unlabeled pretraining corpus, one sentence per line.
    #[arg(long)]
    corpus_out: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    corpus_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::RunConfig::load(cli.config.as_deref()).and_then(|mut cfg| {
        config::apply(&mut cfg.root, cli.root.map(Some));
        match cli.command {
            Command::Pretrain(a) => commands::pretrain(cfg, a),
            Command::Train(a) => commands::train(cfg, a),
            Command::Eval(a) => commands::eval(cfg, a),
            Command::Predict(a) => commands::predict(cfg, a),
            Command::Sweep(a) => sweep::sweep(cfg, a, false),
            Command::Grid(a) => sweep::sweep(cfg, a, true),
            Command::CostReport(a) => commands::cost_report(cfg, a),
            Command::ConvertSnips(a) => commands::convert_snips(a),
            Command::ConvertClinc(a) => commands::convert_clinc(a),
            Command::GenToy(a) => commands::gen_toy(a),
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
