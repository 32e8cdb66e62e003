//! `hoidet` — command-line driver for the HOI detection pipeline: synthetic
//! data, classifier construction, training, inference, evaluation, splits,
//! and a gradient self-check. One JSON config covers every subcommand; flags
//! override it, and the resolved document is copied into the run directory
//! so any run can be replayed byte for byte.

mod artifacts;
mod commands;
mod config;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ClassifierMethod, Overrides};
use errors::Result;
use hoidet::eval::SplitMode;
use hoidet::tensor::Real;

fn parse_split_mode(s: &str) -> std::result::Result<SplitMode, String> {
    s.parse().map_err(|e: hoidet::eval::EvalError| e.to_string())
}

/// Flags shared by every subcommand. Each one overrides the corresponding
/// field of the (possibly file-loaded) run configuration.
#[derive(Args)]
struct Common {
    /// JSON run-configuration file; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run directory; all outputs land here (created if absent).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Reseed every randomized stage (generation, init, training, splits).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Interaction/verb score blend used in training and inference.
    #[arg(long, value_name = "F")]
    alpha: Option<Real>,

    /// Zero-shot enhancement depth; 0 disables the added term.
    #[arg(long, value_name = "N")]
    topk: Option<usize>,

    /// Fraction of training images kept by subsample / train-toy.
    #[arg(long, value_name = "F")]
    fraction: Option<Real>,

    /// Unseen-category split construction rule.
    #[arg(long, value_name = "MODE", value_parser = parse_split_mode)]
    split_mode: Option<SplitMode>,

    /// Write per-layer, per-head attention tensors during inference.
    #[arg(long)]
    dump_attention: bool,

    /// Worker threads for per-image fan-out; 0 means one per core.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,

    /// Verb-classifier construction method.
    #[arg(long, value_enum, value_name = "METHOD")]
    method: Option<ClassifierMethod>,

    /// Unseen-set size for make-splits (default: the mode's standard size).
    #[arg(long, value_name = "N")]
    n_unseen: Option<usize>,

    /// Validation-set size for make-val-split (default: one fifth, rounded up).
    #[arg(long, value_name = "N")]
    val_size: Option<usize>,

    /// Dataset directory (as written by gen-synth or subsample).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Checkpoint directory (as written by train-toy).
    #[arg(long, value_name = "DIR")]
    params: Option<PathBuf>,

    /// Prebuilt verb-classifier tensor file.
    #[arg(long, value_name = "FILE")]
    classifier: Option<PathBuf>,

    /// Detections file (as written by infer).
    #[arg(long, value_name = "FILE")]
    detections: Option<PathBuf>,

    /// Split file restricting eval-map to its unseen categories.
    #[arg(long, value_name = "FILE")]
    split: Option<PathBuf>,

    /// Explicit unseen-category list for make-splits in uc-file mode.
    #[arg(long, value_name = "FILE")]
    unseen_file: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            alpha: self.alpha,
            topk: self.topk,
            fraction: self.fraction,
            split_mode: self.split_mode,
            dump_attention: self.dump_attention,
            workers: self.workers,
            method: self.method,
            n_unseen: self.n_unseen,
            val_size: self.val_size,
            data: self.data.clone(),
            params: self.params.clone(),
            classifier: self.classifier.clone(),
            detections: self.detections.clone(),
            split: self.split.clone(),
            unseen_file: self.unseen_file.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset of HOI feature scenes.
    GenSynth(Common),
    /// Build the verb classifier from a dataset's region features.
    BuildVerbClassifier(Common),
    /// Train the model on a dataset.
    TrainToy(Common),
    /// Run inference over a dataset with a trained checkpoint.
    Infer(Common),
    /// Score a detections file against dataset ground truth.
    EvalMap(Common),
    /// Construct an unseen-category split from the dataset taxonomy.
    MakeSplits(Common),
    /// Partition the dataset images into validation and training sets.
    MakeValSplit(Common),
    /// Derive a smaller dataset keeping a seeded fraction of images.
    Subsample(Common),
    /// Check analytic gradients against finite differences on a toy model.
    Gradcheck(Common),
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::GenSynth(c)
            | Cmd::BuildVerbClassifier(c)
            | Cmd::TrainToy(c)
            | Cmd::Infer(c)
            | Cmd::EvalMap(c)
            | Cmd::MakeSplits(c)
            | Cmd::MakeValSplit(c)
            | Cmd::Subsample(c)
            | Cmd::Gradcheck(c) => c,
        }
    }
}

#[derive(Parser)]
#[command(name = "hoidet", version, about = "HOI detection pipeline driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn run(cli: &Cli) -> Result<()> {
    let common = cli.cmd.common();
    let cfg = config::resolve(common.config.as_deref(), &common.overrides())?;
    let out = common.out.as_path();
    artifacts::init_run_dir(out, &cfg)?;
    match &cli.cmd {
        Cmd::GenSynth(_) => commands::gen_synth::run(&cfg, out),
        Cmd::BuildVerbClassifier(_) => commands::build_classifier::run(&cfg, out),
        Cmd::TrainToy(_) => commands::train_toy::run(&cfg, out),
        Cmd::Infer(_) => commands::infer::run(&cfg, out),
        Cmd::EvalMap(_) => commands::eval_map::run(&cfg, out),
        Cmd::MakeSplits(_) => commands::splits::run_make_splits(&cfg, out),
        Cmd::MakeValSplit(_) => commands::splits::run_make_val_split(&cfg, out),
        Cmd::Subsample(_) => commands::subsample::run(&cfg, out),
        Cmd::Gradcheck(_) => commands::gradcheck::run(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hoidet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
