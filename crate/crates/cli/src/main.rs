use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ctxfer_cli::{clear_error_artifact, run, write_error_artifact, Command, Overrides, RunConfig};
use ctxfer_core::training::AblationVariant;

#[derive(Parser, Debug)]
#[command(name = "ctxfer", version, about = "Context-aware trajectory prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML run configuration. Flags below take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<AblationVariant>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Held-out test scene.
    #[arg(long, global = true)]
    scene: Option<String>,
    /// Candidates per sample for best-of-K metrics.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Sample to render, as scene:agent@frame. Repeatable.
    #[arg(long = "sample", global = true)]
    samples: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Sub {
    /// Generate a synthetic scene bundle and its manifest.
    Synth,
    /// Fit activity-density labels for every scene.
    FitDensity,
    /// Pretrain the physical transfer model on the training scenes.
    TrainTransfer,
    /// Train the predictor end to end.
    Train,
    /// Evaluate on the held-out scene.
    Eval,
    /// Render context heatmaps with trajectories for chosen samples.
    Render,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Synth => Command::Synth,
            Sub::FitDensity => Command::FitDensity,
            Sub::TrainTransfer => Command::TrainTransfer,
            Sub::Train => Command::Train,
            Sub::Eval => Command::Eval,
            Sub::Render => Command::Render,
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CTXFER_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("CTXFER_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        variant: cli.variant,
        out: cli.out.clone(),
        scene: cli.scene.clone(),
        k: cli.k,
        samples: cli.samples.clone(),
    });
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    let out = cli.out.clone().unwrap_or_else(|| RunConfig::default().paths.out);
    let result = init_threads().and_then(|()| {
        let cfg = load_config(&cli)?;
        run(command, &cfg)?;
        clear_error_artifact(&cfg.paths.out)?;
        Ok(cfg)
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let dir = load_config(&cli).map(|c| c.paths.out).unwrap_or(out);
            if let Err(e) = write_error_artifact(&dir, command.name(), &format!("{err:#}")) {
                eprintln!("error: could not record the failure: {e}");
            }
            ExitCode::FAILURE
        }
    }
}
