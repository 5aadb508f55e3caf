use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use worldflow::train::FINAL_CHECKPOINT;
use worldflow_cli::commands::{self, UsageError};
use worldflow_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "worldflow", version, about = "Joint video / world-knowledge flow matching at desk scale")]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Override the number of training steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Output directory, replacing the one in the config's paths.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training episodes and held-out prompts.
    GenData,
    /// Fit feature models and cache world latents.
    Preprocess,
    /// Train the video-only base model.
    PretrainBase {
        #[arg(long)]
        resume: bool,
    },
    /// Train the joint model from the expanded base.
    Train {
        #[arg(long)]
        resume: bool,
    },
    /// Generate clips for the held-out prompts.
    Sample,
    /// Score generated clips.
    Eval,
    /// Compare analytic gradients against finite differences.
    GradCheck,
    /// Print the resolved configuration.
    ShowConfig,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(steps) = cli.steps {
        config.train.steps = steps;
        config.base.steps = steps;
    }
    config.validate().map_err(|e| UsageError(format!("invalid configuration: {e:#}")))?;
    let p = config.paths.clone();
    let out = |default: &PathBuf| cli.out.clone().unwrap_or_else(|| default.clone());
    match cli.command {
        Command::GenData => {
            commands::gen_data(&config, &out(&p.data), cli.force)?;
        }
        Command::Preprocess => {
            commands::preprocess(&config, &p.data, &out(&p.features), cli.force)?;
        }
        Command::PretrainBase { resume } => {
            commands::pretrain_base(&config, &out(&p.base), cli.force, resume)?;
        }
        Command::Train { resume } => {
            commands::train(&config, &out(&p.run), cli.force, resume)?;
        }
        Command::Sample => {
            commands::sample_prompts(&config, &p.run.join(FINAL_CHECKPOINT), &out(&p.samples), cli.force)?;
        }
        Command::Eval => {
            commands::eval(&config, &p.samples, &out(&p.eval), cli.force)?;
        }
        Command::GradCheck => {
            let outcome = commands::grad_check(&config)?;
            let failures = outcome.failures();
            if !failures.is_empty() {
                anyhow::bail!("gradient check failed: {}", failures.join(", "));
            }
            println!("grad-check: all within tolerance");
        }
        Command::ShowConfig => {
            println!("# fingerprint {}", config.fingerprint());
            print!("{}", toml::to_string(&config)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
