//! `panoseg`: data generation, training, adaptation, evaluation and ablations.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "panoseg", version, about = "Panoramic semantic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural multi-domain benchmark.
    GenData(GenDataArgs),
    /// Source-only supervised training.
    Train(TrainArgs),
    /// Prototypical adaptation to the target domain.
    Adapt(AdaptArgs),
    /// Confusion matrix and mIoU of a checkpoint.
    Eval(EvalArgs),
    /// mIoU over centered field-of-view crops.
    FovSweep(FovArgs),
    /// mIoU per compass direction band.
    DirMiou(DirArgs),
    /// Resample six cubemap faces into an equirectangular image.
    Project(ProjectArgs),
    /// Color-coded label maps and offset overlays.
    Visualize(VisualizeArgs),
    /// Sweep the regional restriction r.
    AblateR(AblateRArgs),
    /// Sweep the MPA weight and temperature.
    AblateHparams(AblateHparamsArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Toy,
    Tiny,
    Small,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoderArg {
    V1,
    V2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PatchEmbedArg {
    Standard,
    Deformable,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "toy")]
    preset: PresetArg,
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
    #[arg(long = "patch-embed", value_enum)]
    patch_embed: Option<PatchEmbedArg>,
    /// Regional restriction: a positive integer or `inf`.
    #[arg(long)]
    r: Option<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Benchmark config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long = "manifest-source")]
    manifest_source: PathBuf,
    /// Manifest whose val split is evaluated periodically.
    #[arg(long = "manifest-target")]
    manifest_target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    iters: Option<usize>,
    /// Training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long = "manifest-source")]
    manifest_source: PathBuf,
    #[arg(long = "manifest-target")]
    manifest_target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Source-only checkpoint to start from; a fresh model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Adaptation config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Clone)]
struct EvalData {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to evaluate.
    #[arg(long = "manifest-target")]
    manifest_target: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: EvalData,
}

#[derive(Args, Debug)]
struct FovArgs {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, value_delimiter = ',', default_value = "90,180,270,360")]
    fovs: Vec<f64>,
}

#[derive(Args, Debug)]
struct DirArgs {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, default_value_t = 8)]
    dirs: usize,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    /// Directory holding front/right/back/left/up/down.ppm.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// ERP height; twice the face size by default.
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[command(flatten)]
    data: EvalData,
    /// Number of images to render.
    #[arg(long, default_value_t = 4)]
    limit: usize,
}

#[derive(Args, Debug)]
struct AblateRArgs {
    #[arg(long = "manifest-source")]
    manifest_source: PathBuf,
    /// Evaluation manifest (val split); the source val split otherwise.
    #[arg(long = "manifest-target")]
    manifest_target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training iterations per configuration.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Comma-separated r grid.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,inf")]
    r: Vec<String>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: PresetArg,
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
}

#[derive(Args, Debug)]
struct AblateHparamsArgs {
    #[arg(long = "manifest-source")]
    manifest_source: PathBuf,
    #[arg(long = "manifest-target")]
    manifest_target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adaptation iterations per grid point.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Source-only iterations before the sweep.
    #[arg(long = "source-iters", default_value_t = 100)]
    source_iters: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.0001,0.001,0.01,0.1")]
    alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,40")]
    temperature: Vec<f64>,
    /// Adaptation config JSON used for every grid point.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: PresetArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match commands::run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
