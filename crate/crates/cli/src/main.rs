//! `latent-dialog`: prepare corpora, train the VAE and the latent GAN,
//! generate responses, evaluate them, and run the self-check battery.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_dialog::inference::SampleSource;

/// Environment variable holding the log filter (`error`, `warn`, `info`,
/// `debug`, `trace`).
pub const LOG_ENV: &str = "LATENT_DIALOG_LOG";

#[derive(Parser)]
#[command(
    name = "latent-dialog",
    version,
    about = "Two-step latent-space dialog generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML run configuration; every field has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed, overriding the one in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory holding the vocabulary, checkpoints and outputs.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Source {
    Posterior,
    Mean,
    Decoder,
}

impl From<Source> for SampleSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Posterior => SampleSource::Posterior,
            Source::Mean => SampleSource::Mean,
            Source::Decoder => SampleSource::Decoder,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and report corpus and sample counts.
    Prepare(Common),
    /// Train the sentence VAE and keep the best validation checkpoint.
    TrainVae(Common),
    /// Train the conditional latent GAN against a trained VAE.
    TrainGan(Common),
    /// Write sampled responses for every test query.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Responses per query.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Where sample-to-sample variation comes from.
        #[arg(long, value_enum)]
        source: Option<Source>,
        /// Preceding utterances given as context (multi-turn models only).
        #[arg(long)]
        context_turns: Option<usize>,
    },
    /// Score a response file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Response file; defaults to `responses.tsv` in the run directory.
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Corpus for the language model; defaults to the training split.
        #[arg(long)]
        lm_corpus: Option<PathBuf>,
    },
    /// Run gradient checks, closed-form checks and metric oracles.
    Verify,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(c) => commands::prepare(&c),
        Command::TrainVae(c) => commands::train_vae(&c),
        Command::TrainGan(c) => commands::train_gan(&c),
        Command::Generate {
            common,
            n_samples,
            source,
            context_turns,
        } => commands::generate(&common, n_samples, source.map(Into::into), context_turns),
        Command::Evaluate {
            common,
            responses,
            lm_corpus,
        } => commands::evaluate(&common, responses, lm_corpus),
        Command::Verify => commands::verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
