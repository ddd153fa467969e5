use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sacd_core::run::commands;
use sacd_core::run::{train, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "sacd", version, about = "Train, evaluate and analyse value-decomposed SAC agents")]
struct Cli {
    /// Where outputs go. `train` uses it as the run directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the config seed (train) or the episode seed (evaluate, analyze).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run deterministic evaluation episodes from a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Config to use instead of the run directory snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write influence or prediction-accuracy reports.
    Analyze {
        #[arg(long, value_enum)]
        mode: Mode,
        /// A checkpoint, or run directories for `influence-summary`.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Episodes rolled out for `returns-vs-predictions`.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Steps before termination used for `returns-vs-predictions`.
        #[arg(long, default_value_t = 25)]
        window: usize,
        /// Truncate the `influence-trajectory` episode.
        #[arg(long)]
        max_steps: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    InfluenceTrajectory,
    InfluenceSummary,
    ReturnsVsPredictions,
}

/// Run directory above `<run>/checkpoints/<file>`, falling back to the working directory.
fn default_output(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn checkpoint_stem(checkpoint: &Path) -> String {
    checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

fn single_input(input: &[PathBuf]) -> Result<&Path> {
    match input {
        [one] => Ok(one),
        _ => bail!("this mode takes exactly one --input checkpoint"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train { config } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run_dir = cli
                .output_dir
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| {
                    let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy());
                    PathBuf::from("runs").join(format!("{stem}-seed{}", cfg.seed))
                });
            let outcome = train(&cfg, &run_dir)?;
            println!(
                "trained {} gradient steps ({} env steps, {} episodes) into {}",
                outcome.agent.grad_steps,
                outcome.env_steps,
                outcome.episodes,
                run_dir.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            episodes,
            config,
        } => {
            let out = cli
                .output_dir
                .unwrap_or_else(|| default_output(&checkpoint))
                .join(format!("eval_{}.csv", checkpoint_stem(&checkpoint)));
            let rows = commands::evaluate(&checkpoint, config.as_deref(), episodes, seed.unwrap_or(0), &out)?;
            let n = rows.len().max(1) as f64;
            let mean = rows.iter().map(|r| r.composite).sum::<f64>() / n;
            let succ = rows.iter().filter(|r| r.success).count();
            println!(
                "{} episodes, mean composite {mean:.4}, {succ} successful; wrote {}",
                rows.len(),
                out.display()
            );
        }
        Command::Analyze {
            mode,
            input,
            config,
            episodes,
            window,
            max_steps,
        } => {
            let seed = seed.unwrap_or(0);
            match mode {
                Mode::InfluenceTrajectory => {
                    let ckpt = single_input(&input)?;
                    let out = cli
                        .output_dir
                        .unwrap_or_else(|| default_output(ckpt))
                        .join(format!("influence_{}.csv", checkpoint_stem(ckpt)));
                    let samples = commands::influence_trajectory(ckpt, config.as_deref(), seed, max_steps, &out)?;
                    println!("{} states; wrote {}", samples.len(), out.display());
                }
                Mode::InfluenceSummary => {
                    let out = cli
                        .output_dir
                        .unwrap_or_else(|| input[0].clone())
                        .join("influence_summary.csv");
                    let summary = commands::influence_summary(&input, &out)?;
                    println!("{} snapshots; wrote {}", summary.steps.len(), out.display());
                }
                Mode::ReturnsVsPredictions => {
                    let ckpt = single_input(&input)?;
                    let out = cli
                        .output_dir
                        .unwrap_or_else(|| default_output(ckpt))
                        .join(format!("accuracy_{}.csv", checkpoint_stem(ckpt)));
                    let report =
                        commands::returns_vs_predictions(ckpt, config.as_deref(), episodes, seed, window, &out)?;
                    println!(
                        "{} trajectories ({} too short); wrote {}",
                        report.trajectories,
                        report.skipped_short,
                        out.display()
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
