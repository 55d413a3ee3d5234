mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kcm_retrieval::preprocessing::CropRect;

#[derive(Parser, Debug)]
#[command(name = "kcmr", version, about = "Composition-aware image retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration for this subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice this subcommand makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine frames and triplets from shot annotations.
    Prepare {
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the composition classifier.
    TrainComposition {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        synthetic_per_class: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the retrieval network against a frozen composition classifier.
    TrainRetrieval {
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        ccnet: Option<PathBuf>,
        #[arg(long)]
        l_kcm: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Embed a frame list into a retrieval index.
    BuildIndex {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rank index entries against one query image.
    Query {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(short, long)]
        k: Option<usize>,
        #[arg(long, value_parser = config::parse_crop)]
        crop: Option<CropRect>,
        #[command(flatten)]
        common: Common,
    },
    /// Score anchor groups of held-out shots.
    Evaluate {
        #[arg(long)]
        shots: Option<PathBuf>,
        #[arg(long, conflicts_with = "index")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        margin: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the key composition map of one image.
    ExportKcm {
        #[arg(long)]
        ccnet: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, value_parser = config::parse_crop)]
        crop: Option<CropRect>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic shot-annotated film corpus.
    SynthFilms {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic composition dataset.
    SynthComposition {
        #[arg(long)]
        per_class: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cmd: Command) -> kcm_retrieval::Result<()> {
    use commands::*;
    match cmd {
        Command::Prepare { annotations, frames, test_fraction, common } => {
            prepare(&common, annotations, frames, test_fraction)
        }
        Command::TrainComposition { data, synthetic_per_class, epochs, common } => {
            train_composition(&common, data, synthetic_per_class, epochs)
        }
        Command::TrainRetrieval { triplets, ccnet, l_kcm, epochs, common } => {
            train_retrieval(&common, triplets, ccnet, l_kcm, epochs)
        }
        Command::BuildIndex { checkpoint, frames, common } => build_index(&common, checkpoint, frames),
        Command::Query { index, checkpoint, image, k, crop, common } => {
            query(&common, index, checkpoint, image, k, crop)
        }
        Command::Evaluate { shots, checkpoint, index, margin, common } => {
            evaluate(&common, shots, checkpoint, index, margin)
        }
        Command::ExportKcm { ccnet, image, crop, common } => export_kcm(&common, ccnet, image, crop),
        Command::SynthFilms { common } => synth_films(&common),
        Command::SynthComposition { per_class, common } => synth_composition(&common, per_class),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
