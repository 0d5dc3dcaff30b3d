//! `gnv`: runs the synthetic instance-segmentation pipeline stage by stage.
//!
//! Exit codes: 0 success, 1 configuration or user error, 2 backend failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod config;
pub mod error;
pub mod progress;
pub mod stages;
pub mod state;

pub use config::RunConfig;
pub use error::CliError;

use progress::Progress;
use stages::Ctx;
use state::Stage;

#[derive(Debug, Parser)]
#[command(
    name = "gnv",
    version,
    about = "Generate and validate synthetic instance-segmentation data"
)]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, env = config::CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print progress as one JSON object per line.
    #[arg(long, global = true)]
    pub json: bool,
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the prompt-writing and validation system prompts.
    OptimizePrompts,
    /// Generate object instances and backgrounds.
    Generate {
        /// Number of instances; defaults to the configured count.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Judge every generated instance with the vision endpoint.
    Validate,
    /// Paste kept instances onto backgrounds.
    Compose,
    /// Write the COCO dataset, stats and manifest.
    Emit,
    /// All stages in order.
    Run,
    /// Recompute stats.json from the verdicts on disk.
    Stats,
    /// Validate an emitted dataset.
    Check {
        /// Dataset directory or annotations file; defaults to the output directory.
        path: Option<PathBuf>,
    },
}

impl Cli {
    fn load_config(&self) -> Result<RunConfig, CliError> {
        let path = self.config.as_ref().ok_or_else(|| {
            CliError::Config(format!(
                "no config given; pass --config or set {}",
                config::CONFIG_ENV
            ))
        })?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.dataset.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn run_all(ctx: &mut Ctx) -> Result<(), CliError> {
    if ctx.cfg.prompts.optimize {
        stages::optimize_prompts(ctx)?;
    }
    stages::generate(ctx, None)?;
    stages::validate(ctx)?;
    stages::compose(ctx)?;
    stages::emit(ctx)?;
    ctx.finish(Stage::Done)
}

/// Executes one parsed command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let progress = Progress::new(cli.json);
    if let Command::Check { path } = &cli.command {
        let target = match (path, &cli.out) {
            (Some(p), _) => p.clone(),
            (None, Some(o)) => o.clone(),
            (None, None) => cli.load_config()?.dataset.out_dir,
        };
        let violations = stages::check(&target, progress)?;
        if !violations.is_empty() {
            for v in &violations {
                log::error!("{v}");
            }
            return Err(CliError::Precondition(format!(
                "{} violation(s) found",
                violations.len()
            )));
        }
        return Ok(());
    }

    let mut ctx = Ctx::new(cli.load_config()?, progress)?;
    match &cli.command {
        Command::OptimizePrompts => stages::optimize_prompts(&mut ctx),
        Command::Generate { count } => stages::generate(&mut ctx, *count),
        Command::Validate => stages::validate(&mut ctx),
        Command::Compose => stages::compose(&mut ctx),
        Command::Emit => stages::emit(&mut ctx),
        Command::Run => run_all(&mut ctx),
        Command::Stats => stages::stats(&ctx).map(|_| ()),
        Command::Check { .. } => unreachable!("handled above"),
    }
}
