//! `sgxp`: synthetic corpora, splits, U-Net lung segmentation, two-phase
//! classification, LIME / Grad-CAM explanations and the mask review
//! service, one subcommand per step.
//!
//! Every run writes `config.json` (the resolved experiment config),
//! `report.json`, `timestamps.json` and `files.manifest` under `--out`.
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

pub mod commands;
pub mod data;
pub mod error;
pub mod output;
pub mod settings;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

use commands::*;
pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "sgxp", version, about = "Lung segmentation, classification and explanation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    Synth(synth::SynthArgs),
    Split(split::SplitArgs),
    SegTrain(seg::SegTrainArgs),
    SegPredict(seg::SegPredictArgs),
    ClfTrain(clf::ClfTrainArgs),
    ClfEval(clf::ClfEvalArgs),
    Explain(explain::ExplainArgs),
    Heatmap(heatmap::HeatmapArgs),
    Stats(stats::StatsArgs),
    Serve(serve::ServeArgs),
    Compare(compare::CompareArgs),
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Split(a) => split::run(a),
        Command::SegTrain(a) => seg::run_train(a),
        Command::SegPredict(a) => seg::run_predict(a),
        Command::ClfTrain(a) => clf::run_train(a),
        Command::ClfEval(a) => clf::run_eval(a),
        Command::Explain(a) => explain::run(a),
        Command::Heatmap(a) => heatmap::run(a),
        Command::Stats(a) => stats::run(a),
        Command::Serve(a) => serve::run(a),
        Command::Compare(a) => compare::run(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    output::mark_start();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
