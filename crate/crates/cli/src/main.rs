//! `cpak`: synthetic data, models, CAVs, TCAV scores, token-pushing attacks,
//! faceted visualizations and the experiment harness behind one binary.
//!
//! Progress goes to stderr; results go to files under `--out` and, for the
//! scalar-valued commands, to stdout as JSON.

mod commands;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cpak", version, about = "Concept-based interpretability and token-pushing attacks")]
pub struct Cli {
    /// Worker threads for every parallel stage.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
    /// Progress lines on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the labelled synthetic dataset.
    GenData(GenData),
    /// Train a small convnet on synthetic data.
    TrainModel(TrainModel),
    /// Render positive, negative and unrelated token sets for a concept.
    MakeConcepts(MakeConcepts),
    /// Fit one CAV per negative set at a layer.
    TrainCav(TrainCav),
    /// Magnitude TCAV score with a significance test against random concepts.
    TcavScore(TcavScore),
    /// Push concept tokens toward the unrelated (or a target) centroid.
    Attack(AttackCmd),
    /// Channel or faceted feature visualization.
    Ffv(Ffv),
    /// Fréchet distance between two image directories.
    Fid(Fid),
    /// Run an experiment scenario from a config file or preset.
    Run(Run),
    /// Recompute a run's tables from its artifacts and diff them.
    Replay(Replay),
    /// Quick checks of every module.
    Selftest(Selftest),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct TrainModel {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, ignore_case = true, default_value_t = ArchArg::A)]
    pub arch: ArchArg,
    /// Dataset written by `gen-data`; rendered from `--seed` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MakeConcepts {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Texture concept, e.g. `stripes`.
    #[arg(long)]
    pub concept: String,
    #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
    pub scale: ScaleArg,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct TrainCav {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub model: PathBuf,
    /// Directory written by `make-concepts`.
    #[arg(long)]
    pub concepts: PathBuf,
    #[arg(long, default_value = "pool2")]
    pub layer: String,
    /// Use these tokens (written by `attack`) as positives instead.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TcavScore {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    /// Dataset whose images of `--class` are scored.
    #[arg(long)]
    pub data: PathBuf,
    /// Class name, e.g. `stripe-class`.
    #[arg(long)]
    pub class: String,
    #[arg(long, default_value = "pool2")]
    pub layer: String,
    #[arg(long)]
    pub tokens: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackCmd {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    /// Concept directory whose positives define the target centroid.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    pub epsilon: f32,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Step size; `epsilon / 4` when absent.
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long, default_value = "pool2")]
    pub layer: String,
}

#[derive(Args, Debug)]
pub struct Ffv {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "pool2")]
    pub layer: String,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// CAV set from `train-cav`; its first CAV facets the objective.
    #[arg(long)]
    pub cav: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    #[arg(long)]
    pub facet_weight: Option<f64>,
}

#[derive(Args, Debug)]
pub struct Fid {
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder model; its `relu3` channel means are the embedding.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Directories of `.ppm` images.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Args, Debug)]
pub struct Run {
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named configuration, see `--list-presets`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub list_presets: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Primary attack layer.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,
    /// Trained-model cache shared between runs.
    #[arg(long, env = "CPAK_CACHE")]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Replay {
    /// Run directory, or its `results.json`.
    pub results: PathBuf,
}

#[derive(Args, Debug)]
pub struct Selftest {
    /// Also run the smoke scenario and replay it under this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs as usize).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match commands::dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(commands::Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
