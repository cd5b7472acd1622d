//! `lpa3d`: dataset generation, training and evaluation verbs. Every verb
//! prints one JSON record to stdout on success; on failure it prints an
//! error record to stderr and exits nonzero.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(
    name = "lpa3d",
    version,
    about = "Room-scale 3D-aware GAN with anchor-based camera poses"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

/// Flags shared by every verb.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the verb's configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Generate a synthetic room dataset with withheld ground-truth poses.
    Genworld(Common),
    /// Joint GAN and camera-predictor training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start over even if the output directory holds checkpoints.
        #[arg(long)]
        fresh: bool,
        /// Override the step budget.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the anchor classifier on labeled images.
    TrainAnchor(Common),
    /// Train the foreground segmenter whose backbone the predictor reuses.
    TrainSegmenter(Common),
    /// Pose errors of a checkpoint's camera predictor against ground truth.
    EvalPose(Common),
    /// Histograms of predicted and ground-truth poses.
    Histograms(Common),
    /// Feature-distribution distance between generated and real images.
    Metrics(Common),
    /// Fraction of generated scenes without exactly one core object.
    Abnormality(Common),
    /// Panoramas and camera trajectories through generated scenes.
    Render(Common),
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Genworld(_) => "genworld",
            Verb::Train { .. } => "train",
            Verb::TrainAnchor(_) => "train-anchor",
            Verb::TrainSegmenter(_) => "train-segmenter",
            Verb::EvalPose(_) => "eval-pose",
            Verb::Histograms(_) => "histograms",
            Verb::Metrics(_) => "metrics",
            Verb::Abnormality(_) => "abnormality",
            Verb::Render(_) => "render",
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use lpa3d::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::InvalidInput(_)) => "invalid_input",
        Some(E::Io { .. }) => "io",
        Some(E::Format { .. }) => "format",
        Some(E::RejectionExhausted { .. }) => "rejection_exhausted",
        Some(E::NonFinite(_)) => "non_finite",
        Some(E::Config(_)) => "config",
        None if err.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "other",
    }
}

fn error_record(verb: &str, kind: &str, message: String, chain: Vec<String>) -> Value {
    json!({ "status": "error", "verb": verb, "kind": kind, "message": message, "chain": chain })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = error_record("", "usage", e.to_string().trim().to_string(), Vec::new());
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    let verb = cli.verb.name();
    let result = match cli.verb {
        Verb::Genworld(c) => commands::genworld(&c),
        Verb::Train {
            common,
            fresh,
            steps,
        } => commands::train(&common, fresh, steps),
        Verb::TrainAnchor(c) => commands::train_anchor(&c),
        Verb::TrainSegmenter(c) => commands::train_segmenter(&c),
        Verb::EvalPose(c) => commands::eval_pose(&c),
        Verb::Histograms(c) => commands::histograms(&c),
        Verb::Metrics(c) => commands::metrics(&c),
        Verb::Abnormality(c) => commands::abnormality(&c),
        Verb::Render(c) => commands::render(&c),
    };
    match result {
        Ok(value) => {
            println!(
                "{}",
                json!({ "status": "ok", "verb": verb, "result": value })
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain = e.chain().skip(1).map(ToString::to_string).collect();
            eprintln!(
                "{}",
                error_record(verb, error_kind(&e), e.to_string(), chain)
            );
            ExitCode::FAILURE
        }
    }
}
