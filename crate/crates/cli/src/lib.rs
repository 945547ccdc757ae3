//! Command-line driver: data generation, training, concept extraction,
//! scoring, mitigation and reporting over a run directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod stamp;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Context;
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "biasprobe", version, about = "Post-hoc bias audits of frozen classifiers")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset into `<out>/data`.
    GenData,
    /// Train the classifier on the training split.
    Train,
    /// Fit per-class concept banks on the audit split and write galleries.
    Concepts,
    /// Score concepts with the gradient probe and merge the banks.
    Score,
    /// Evaluate suppression of the flagged concepts against random ablations.
    Mitigate,
    /// Consolidate the run directory into `report.json`.
    Report,
    /// Score an external model from an activation bundle.
    AuditBundle {
        #[arg(long)]
        bundle: PathBuf,
        /// Companion HEAD file for bundles exported without one.
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Every stage for consecutive seeds, plus a summary.
    Run {
        #[arg(long)]
        n_seeds: Option<usize>,
        /// Run seeds concurrently, each in its own directory.
        #[arg(long)]
        parallel_seeds: bool,
    },
}

/// Resolves the config from the file and flags, then runs the command.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    if let Command::Run { n_seeds, parallel_seeds } = &cli.command {
        if let Some(n) = n_seeds {
            config.n_seeds = *n;
        }
        config.parallel_seeds |= parallel_seeds;
    }
    config.validate()?;
    if let Some(n) = config.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let root = config.output_dir.clone();
    if let Command::Run { .. } = cli.command {
        let summary = commands::run_all(&config, &root)?;
        eprintln!(
            "run: bias recovered in {}/{} seeds, suppression beat ablation in {}/{}",
            summary.recovered_seeds,
            summary.seeds.len(),
            summary.suppression_beats_ablation,
            summary.seeds.len()
        );
        return Ok(());
    }
    let ctx = Context::new(config, root)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train_model(&ctx),
        Command::Concepts => commands::concepts(&ctx),
        Command::Score => commands::score(&ctx),
        Command::Mitigate => commands::mitigate(&ctx),
        Command::Report => commands::report(&ctx).map(|_| ()),
        Command::AuditBundle { bundle, head } => commands::audit_bundle(&ctx, bundle, head.as_deref()),
        Command::Run { .. } => unreachable!("handled above"),
    }
}
