//! `f2hdr`: flow, masks, fusion, refinement, training, metrics and
//! visualisation for alternating-exposure HDR video.

mod commands;
mod config;
mod error;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{CommonArgs, Effective};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "f2hdr", version, about = "HDR video reconstruction from alternating exposures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coarse flows per window, plus adapter-refined flows with --checkpoint.
    Flow(CommonArgs),
    /// Motion mask of a flow file, as PFM and heatmap PNG.
    Mask {
        /// Middlebury `.flo` file.
        flow: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Coarse HDR reconstruction per window.
    Fuse(CommonArgs),
    /// Final HDR reconstruction per window.
    Refine(CommonArgs),
    /// Trains on synthetic windows; the `[train]` table of --config sets the run.
    Train(CommonArgs),
    /// Scores `<results>/<stem>.pfm` against `<gt>/<stem>.pfm`.
    Metrics {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Renders a `.flo` file with the color wheel or a `.pfm` mask as a heatmap.
    Viz {
        input: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Flow(c) => commands::flow(&Effective::resolve("flow", &c)?),
        Command::Mask { flow, common } => commands::mask(&Effective::resolve("mask", &common)?, &flow),
        Command::Fuse(c) => commands::reconstruct(&Effective::resolve("fuse", &c)?, commands::Output::Coarse),
        Command::Refine(c) => commands::reconstruct(&Effective::resolve("refine", &c)?, commands::Output::Final),
        Command::Train(c) => commands::train(&Effective::resolve("train", &c)?),
        Command::Metrics { results, gt, common } => {
            let mut eff = Effective::resolve("metrics", &common)?;
            eff.results = results.or(eff.results);
            eff.gt = gt.or(eff.gt);
            commands::metrics(&eff)
        }
        Command::Viz { input, common } => commands::viz(&Effective::resolve("viz", &common)?, &input),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
