//! `mpi-facedit` — desk-scale MPI face editing pipeline.
//!
//! ```text
//! mpi-facedit <command> --config run.toml [overrides]
//! ```
//!
//! Commands run sequentially against one workdir (flag `--workdir`, config
//! `paths.workdir`, or env `MPI_FACEDIT_WORKDIR`), guarded by an advisory
//! lock. Every command writes a provenance manifest; rerunning with the
//! same config and seed rewrites identical artifacts.

mod commands;
mod config;
mod manifest;
mod workdir;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "mpi-facedit",
    about = "Few-shot identity-preserving attribute editing on a desk-scale MPI GAN",
    version
)]
struct Cli {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Workdir holding all artifacts (overrides config and MPI_FACEDIT_WORKDIR)
    #[arg(long, global = true, value_name = "DIR")]
    workdir: Option<PathBuf>,

    /// Master seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log filter: error, warn, info, debug or trace
    #[arg(long, global = true)]
    log_level: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural face dataset
    Dataset,
    /// Train the MPI GAN on the dataset
    TrainGan {
        /// Training steps (overrides [gan] steps)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the inversion encoder against the frozen generator
    TrainEncoder {
        /// Training steps (overrides [encoder] steps)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build cut-and-paste attribute pairs from the dataset
    Pairs {
        /// Single attribute (default: every [pairs] attribute)
        #[arg(long)]
        attribute: Option<String>,
    },
    /// Estimate edit directions from saved pairs
    Estimate {
        /// Single attribute (default: every [pairs] attribute)
        #[arg(long)]
        attribute: Option<String>,
    },
    /// Render cumulative-edit grids (and optional orbit strips)
    EditRender {
        /// Attribute to edit
        #[arg(long, conflicts_with = "sequential")]
        attribute: Option<String>,
        /// Comma-separated attributes applied cumulatively, e.g. glasses,aged
        #[arg(long)]
        sequential: Option<String>,
        /// Edit scale (overrides [edit] scale)
        #[arg(long)]
        scale: Option<f64>,
        /// Orbit views of the final edit appended per row; 1 = frontal only
        #[arg(long)]
        orbit_views: Option<usize>,
    },
    /// Invert one PNG into W+ and render its reconstruction
    Invert {
        /// Input PNG at the generator's resolution
        #[arg(long)]
        input: PathBuf,
    },
    /// Pivotal tuning: fine-tune a generator copy around one inversion
    Pti {
        /// Input PNG at the generator's resolution
        #[arg(long)]
        input: PathBuf,
        /// Tuning steps (overrides [pti] steps)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compute the metric report (FID/KID, identity, efficacy, views)
    Eval,
    /// Sweep the number of pairs K and report the efficacy trend
    Ablate {
        /// Attribute to sweep (overrides [ablate] attribute)
        #[arg(long)]
        attribute: Option<String>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let overrides = Overrides {
        workdir: cli.workdir.clone(),
        seed: cli.seed,
        log_level: cli.log_level.clone(),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .init();
    let ctx = commands::Ctx::new(cfg)?;
    match &cli.command {
        Command::Dataset => commands::cmd_dataset(&ctx),
        Command::TrainGan { steps } => commands::cmd_train_gan(&ctx, *steps),
        Command::TrainEncoder { steps } => commands::cmd_train_encoder(&ctx, *steps),
        Command::Pairs { attribute } => commands::cmd_pairs(&ctx, attribute.as_deref()),
        Command::Estimate { attribute } => commands::cmd_estimate(&ctx, attribute.as_deref()),
        Command::EditRender {
            attribute,
            sequential,
            scale,
            orbit_views,
        } => commands::cmd_edit_render(
            &ctx,
            attribute.as_deref(),
            sequential.as_deref(),
            *scale,
            *orbit_views,
        ),
        Command::Invert { input } => commands::cmd_invert(&ctx, input),
        Command::Pti { input, steps } => commands::cmd_pti(&ctx, input, *steps),
        Command::Eval => commands::cmd_eval(&ctx),
        Command::Ablate { attribute } => commands::cmd_ablate(&ctx, attribute.as_deref()),
    }
}
