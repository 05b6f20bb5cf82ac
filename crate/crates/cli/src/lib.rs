//! Command-line pipeline around `puppetry-core`.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod layout;
pub mod metrics;
pub mod output;
pub mod scene;

/// Bad user input: a missing path, a malformed file or an invalid setting.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

/// Exit status for an error: invalid input maps to 2, anything else to 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use puppetry_core::Error as E;
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return EXIT_INVALID;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidInput(_) | E::Format { .. } | E::Checkpoint(_) => EXIT_INVALID,
                E::Diverged { .. } | E::Io(_) => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

#[derive(Debug, Parser)]
#[command(
    name = "puppetry",
    version,
    about = "Audio-driven facial reenactment pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Project configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch count for the training stage being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Frame width and height in pixels.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Dataset root; overrides `data_root` in the config.
    #[arg(long, env = config::DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    /// Output directory; written atomically.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Input checkpoint; repeat for commands that need several.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with known ground truth.
    MakeOracleCorpus(CommonArgs),
    /// Train the audio-to-expression network and per-sequence mappings.
    TrainA2e(CommonArgs),
    /// Fit the mapping of the target person from its tracked expressions.
    FitTarget(CommonArgs),
    /// Train the neural texture and renderer on the target sequence.
    TrainRenderer(CommonArgs),
    /// Render frames driven by an audio logit stream.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// Render only the first N frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Compare audio-driven and tracked-expression renders on held-out frames.
    Eval(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeOracleCorpus(_) => "make-oracle-corpus",
            Command::TrainA2e(_) => "train-a2e",
            Command::FitTarget(_) => "fit-target",
            Command::TrainRenderer(_) => "train-renderer",
            Command::Infer { .. } => "infer",
            Command::Eval(_) => "eval",
        }
    }
}

/// Runs a parsed command and returns its output directory.
pub fn run(cli: Cli) -> anyhow::Result<PathBuf> {
    let name = cli.command.name();
    match cli.command {
        Command::MakeOracleCorpus(a) => commands::make_oracle_corpus(&a),
        Command::TrainA2e(a) => commands::train_a2e(&a),
        Command::FitTarget(a) => commands::fit_target(&a),
        Command::TrainRenderer(a) => commands::train_renderer(&a),
        Command::Infer { common, frames } => commands::infer(&common, frames),
        Command::Eval(a) => commands::eval(&a),
    }
    .map_err(|e| e.context(format!("{name} failed")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let v = anyhow::Error::new(ValidationError("x".into())).context("outer");
        assert_eq!(exit_code(&v), EXIT_INVALID);
        let c = anyhow::Error::new(puppetry_core::Error::Checkpoint("bad".into()));
        assert_eq!(exit_code(&c), EXIT_INVALID);
        let d = anyhow::Error::new(puppetry_core::Error::Diverged {
            epoch: 1,
            batch: 0,
            message: "nan".into(),
        });
        assert_eq!(exit_code(&d), EXIT_FAILURE);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_FAILURE);
    }

    #[test]
    fn cli_parses_repeated_checkpoints() {
        let cli = Cli::try_parse_from([
            "puppetry",
            "infer",
            "--config",
            "p.toml",
            "--checkpoint",
            "a.ckpt",
            "--checkpoint",
            "b.ckpt",
            "--frames",
            "3",
        ])
        .unwrap();
        let Command::Infer { common, frames } = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(common.checkpoints.len(), 2);
        assert_eq!(frames, Some(3));
    }
}
