//! Command-line front end: corpus synthesis, training, grid search,
//! decoding, scoring and diagnostic exports.

pub mod commands;
pub mod config;
pub mod decode;
pub mod spectra;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use decode::Decoder;

#[derive(Debug, Parser)]
#[command(name = "rawcnn", version, about = "Phoneme recognition from raw speech with convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tone-phoneme corpus.
    Synth(SynthArgs),
    /// Train a network (and CRF transitions) on labelled manifests.
    Train(TrainArgs),
    /// Train every configuration of a hyper-parameter grid.
    Grid(GridArgs),
    /// Write one hypothesis file per utterance.
    Decode(DecodeArgs),
    /// Score hypothesis files against reference labels.
    Eval(EvalArgs),
    /// Export first-layer filter magnitude spectra.
    Filters(FiltersArgs),
    /// Train with 0 to 3 pooling stages and report accuracy and size.
    AblatePool(AblateArgs),
    /// Compare analytic and finite-difference gradients on random networks.
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Master seed; overrides the config file's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct NetworkArgs {
    /// Input context in milliseconds.
    #[arg(long)]
    pub window_ms: Option<u32>,
    /// Filter stages as `kW:dW:filters:pool`, comma separated.
    #[arg(long)]
    pub stages: Option<String>,
    /// Hidden layer width.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainingArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// CRF transition training epochs; 0 skips CRF training.
    #[arg(long)]
    pub crf_epochs: Option<usize>,
    #[arg(long)]
    pub crf_lr: Option<f64>,
    /// Minimum phoneme duration in frames for HMM decoding.
    #[arg(long)]
    pub min_duration: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Label alphabet file, one label per line. Collected from the
    /// manifests when absent.
    #[arg(long)]
    pub alphabet: Option<PathBuf>,
    /// Label for frames outside every segment.
    #[arg(long)]
    pub garbage: Option<String>,
    /// Two-column label mapping applied to label files.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Dimension of `feat` inputs.
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub num_train: Option<usize>,
    #[arg(long)]
    pub num_cv: Option<usize>,
    #[arg(long)]
    pub num_test: Option<usize>,
    /// Number of tone classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Use a cyclic bigram where `k -> k+1` is this many times likelier.
    #[arg(long)]
    pub bigram_factor: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Training manifest.
    #[arg(long)]
    pub train: PathBuf,
    /// Cross-validation manifest.
    #[arg(long)]
    pub cv: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub cv: PathBuf,
    /// Train only this many seeded-random grid points.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest of utterances to decode.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum, default_value_t = Decoder::Crf)]
    pub decoder: Decoder,
    #[arg(long)]
    pub min_duration: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Reference manifest.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Directory of `<id>.hyp` files.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Mapping applied to reference labels.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Label removed from both sides before scoring.
    #[arg(long)]
    pub garbage: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct FiltersArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = spectra::DEFAULT_N_FFT)]
    pub n_fft: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub cv: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckGradArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of random networks.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Perturb the analytic gradient of this tensor (test hook).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

pub fn run(cli: Cli) -> rawcnn::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Grid(a) => commands::grid(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Filters(a) => commands::filters(&a),
        Command::AblatePool(a) => commands::ablate_pool(&a),
        Command::CheckGrad(a) => commands::check_grad(&a),
    }
}
