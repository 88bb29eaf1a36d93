//! Command-line interface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::config::{ExperimentConfig, Mode, Overrides};
use crate::error::{HarnessError, Result};
use crate::experiment;

/// Personalized federated training of a channel-aware JSCC image codec,
/// with convergence-bound checks.
#[derive(Debug, Parser)]
#[command(name = "pfljscc", version)]
pub struct Cli {
    /// Mode to run; may also be given with --mode.
    #[arg(value_enum)]
    pub mode: Option<Mode>,
    #[arg(long = "mode", value_enum, conflicts_with = "mode")]
    pub mode_flag: Option<Mode>,
    /// JSON config file, or `paper-defaults`.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub snr_mean: Option<f64>,
    #[arg(long)]
    pub snr_std: Option<f64>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_steps: Option<usize>,
    /// `dual_pipeline|decoder_preprocess|pfl=<bool>`; repeatable.
    #[arg(long = "toggle")]
    pub toggles: Vec<String>,
    /// Checkpoint for channel-sweep.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Cli {
    /// The config after applying flags on top of the file or defaults.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(src) => ExperimentConfig::load(src)?,
            None => ExperimentConfig::paper_defaults(),
        };
        Overrides {
            mode: self.mode.or(self.mode_flag),
            seed: self.seed,
            out: self.out.clone(),
            snr_mean: self.snr_mean,
            snr_std: self.snr_std,
            clients: self.clients,
            rounds: self.rounds,
            local_steps: self.local_steps,
            toggles: self.toggles.clone(),
            checkpoint: self.checkpoint.clone(),
        }
        .apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(argv: &[OsString]) -> Result<()> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            return Err(HarnessError::Usage(
                text.lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .to_string(),
            ));
        }
    };
    let cfg = cli.resolve()?;
    experiment::run(&cfg)
}

/// Runs the CLI and returns the process exit code. Failures print one JSON
/// line to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    match execute(&argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}
