//! `tapkit` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing, corrupt, or unwritable files), 3 verification failure.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{AblateArgs, BootstrapArgs, EvalArgs, GenArgs, GradcheckArgs, RenderArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "tapkit", version, about = "Self-supervised point tracking at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic clips for one domain.
    Gen(GenArgs),
    /// Supervised training on labeled clips.
    Train(TrainArgs),
    /// Student-teacher co-training from a trained checkpoint.
    Bootstrap(BootstrapArgs),
    /// Score a checkpoint on labeled clips.
    Eval(EvalArgs),
    /// Draw predicted tracks over a clip as PNG frames.
    Render(RenderArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Run several ablations over several seeds and tabulate the results.
    Ablate(AblateArgs),
}

/// Operator mistakes: bad flags, bad config values, unknown names.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check ran and failed.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use tapkit::trainer::TrainError;
    for cause in err.chain() {
        if cause.is::<UsageError>() || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Config(_))) {
            return 1;
        }
        if cause.is::<VerificationFailed>() || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::TooManySkips { .. })) {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Bootstrap(a) => commands::bootstrap(a),
        Command::Eval(a) => commands::eval(a),
        Command::Render(a) => commands::render(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
