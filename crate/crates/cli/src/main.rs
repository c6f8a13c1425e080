//! `tdbgan`: synthetic data, staged training, attribute editing and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tdbgan", version, about = "Texture/deformation GAN for face attribute editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural face dataset (PNG images, manifest, ground truth).
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Run the staged training schedule and write a checkpoint plus loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of `dae,gan,joint`.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        /// Train the generator on raw images (without-DAE ablation arm).
        #[arg(long)]
        no_dae: bool,
        /// Force the identity-preservation weight to zero in every stage.
        #[arg(long)]
        no_identity_loss: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Edit images towards target labels such as `smile=1,glasses=0`.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
        #[arg(long)]
        output: PathBuf,
        /// Also write a sheet: input | texture | (texture, image) per target.
        #[arg(long)]
        grid: bool,
    },
    /// Client/impostor verification of edited test images.
    EvalVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        n_client: Option<usize>,
        #[arg(long)]
        n_impostor: Option<usize>,
    },
    /// Classification accuracy of edited test images under an independent classifier.
    EvalCls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare one loss term between two training runs.
    CompareCurves {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "L_cls_f")]
        term: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Failure of a command; decides the exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(tdbgan::Error),
}

impl From<tdbgan::Error> for CliError {
    fn from(e: tdbgan::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<tdbgan_autograd::TensorError> for CliError {
    fn from(e: tdbgan_autograd::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use tdbgan::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::EmptySpec(_) | E::Invalid { .. } | E::LabelMode { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData { common, n_images } => commands::synth(&common, n_images),
        Command::Train {
            common,
            stages,
            no_dae,
            no_identity_loss,
            resume,
        } => commands::train(&common, stages, no_dae, no_identity_loss, resume),
        Command::Edit {
            checkpoint,
            images,
            targets,
            output,
            grid,
        } => commands::edit(&checkpoint, &images, &targets, &output, grid),
        Command::EvalVerify {
            common,
            checkpoint,
            manifest,
            n_client,
            n_impostor,
        } => commands::eval_verify(&common, &checkpoint, manifest, n_client, n_impostor),
        Command::EvalCls {
            common,
            checkpoint,
            manifest,
        } => commands::eval_cls(&common, &checkpoint, manifest),
        Command::CompareCurves { a, b, term, output } => commands::compare_curves(&a, &b, &term, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
