//! Evaluation and analysis over saved runs.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::influence::{
    influence_training_summary, min_composite_twin, trajectory_influence, write_summary_csv,
    write_trajectory_csv, InfluenceSample, InfluenceSummary,
};
use crate::analysis::returns::{
    mc_component_returns, prediction_accuracy, write_accuracy_csv, AccuracyReport, PredictionTrace,
};
use crate::approximator::Matrix;
use crate::rollout::{run_episode, Episode};
use crate::sacd::Agent;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{influence_snapshots, read_metrics};
use super::trainer::{build_agent, Streams, CONFIG_SNAPSHOT, METRICS_LOG};
use super::RunError;

/// Config snapshot belonging to a checkpoint at `<run>/checkpoints/<file>`.
pub fn snapshot_for_checkpoint(checkpoint: &Path) -> Result<PathBuf, RunError> {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|run| run.join(CONFIG_SNAPSHOT))
        .filter(|p| p.exists())
        .ok_or_else(|| {
            RunError::MissingArtifact(format!(
                "{CONFIG_SNAPSHOT} in the run directory above {} (pass a config explicitly)",
                checkpoint.display()
            ))
        })
}

/// Rebuilds the agent stored in `checkpoint`.
pub fn load_agent(checkpoint: &Path, config: Option<&Path>) -> Result<(RunConfig, Agent), RunError> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => snapshot_for_checkpoint(checkpoint)?,
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_hash != cfg.hash()? {
        return Err(RunError::ConfigMismatch);
    }
    let mut agent = build_agent(&cfg, Streams::new(cfg.seed).init)?;
    ckpt.apply_to(&mut agent)?;
    Ok((cfg, agent))
}

fn deterministic_episode(cfg: &RunConfig, agent: &Agent, seed: u64) -> Result<Episode, RunError> {
    let mut env = cfg.env.build()?;
    let mut failure = None;
    let ep = run_episode(env.as_mut(), seed, |obs| {
        agent.policy.deterministic_action(obs).unwrap_or_else(|e| {
            failure = Some(e);
            vec![0.0; agent.policy.action_dim()]
        })
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(ep),
    }
}

fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn create(path: &Path) -> Result<File, RunError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    File::create(path).map_err(|e| RunError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRow {
    pub components: Vec<f64>,
    pub composite: f64,
    pub success: bool,
}

/// Deterministic-policy episodes; writes one CSV row per episode.
pub fn evaluate(
    checkpoint: &Path,
    config: Option<&Path>,
    episodes: usize,
    seed: u64,
    out_csv: &Path,
) -> Result<Vec<EvaluationRow>, RunError> {
    let (cfg, agent) = load_agent(checkpoint, config)?;
    let comps = agent.components().to_vec();
    let mut rows = Vec::with_capacity(episodes);
    for s in episode_seeds(seed, episodes) {
        let ep = deterministic_episode(&cfg, &agent, s)?;
        let totals = ep.component_totals(comps.len());
        let composite = totals.iter().zip(&comps).map(|(v, c)| v * c.weight).sum();
        rows.push(EvaluationRow {
            components: totals,
            composite,
            success: ep.success,
        });
    }
    let mut w = csv::Writer::from_writer(create(out_csv)?);
    let mut header = vec!["episode".to_string()];
    header.extend(comps.iter().map(|c| c.name.clone()));
    header.extend(["composite".to_string(), "success".to_string()]);
    w.write_record(&header).map_err(crate::analysis::AnalysisError::from)?;
    for (k, r) in rows.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(r.components.iter().map(|v| v.to_string()));
        rec.extend([r.composite.to_string(), r.success.to_string()]);
        w.write_record(&rec).map_err(crate::analysis::AnalysisError::from)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Fractional influence along one deterministic episode (optionally only its first `max_steps` states).
pub fn influence_trajectory(
    checkpoint: &Path,
    config: Option<&Path>,
    seed: u64,
    max_steps: Option<usize>,
    out_csv: &Path,
) -> Result<Vec<InfluenceSample>, RunError> {
    let (cfg, agent) = load_agent(checkpoint, config)?;
    let ep = deterministic_episode(&cfg, &agent, episode_seeds(seed, 1)[0])?;
    let n = max_steps.map_or(ep.states.len(), |m| m.min(ep.states.len()));
    let hw = agent.head_weights(agent.grad_steps);
    let samples = trajectory_influence(&agent.critic, &agent.policy, &ep.states[..n], &hw)?;
    write_trajectory_csv(create(out_csv)?, &agent.head_names(), &samples)?;
    Ok(samples)
}

/// Training-summary table pooled over one or more run directories.
pub fn influence_summary(run_dirs: &[PathBuf], out_csv: &Path) -> Result<InfluenceSummary, RunError> {
    let mut runs = Vec::new();
    let mut names: Option<Vec<String>> = None;
    for dir in run_dirs {
        let cfg = RunConfig::load(&dir.join(CONFIG_SNAPSHOT))?;
        let agent = build_agent(&cfg, Streams::new(cfg.seed).init)?;
        let heads = agent.head_names();
        if names.as_ref().is_some_and(|n| *n != heads) {
            return Err(RunError::Config("runs have different reward components".into()));
        }
        let log = dir.join(METRICS_LOG);
        if !log.exists() {
            return Err(RunError::MissingArtifact(format!("{}", log.display())));
        }
        runs.push(influence_snapshots(&read_metrics(&log)?, &heads));
        names = Some(heads);
    }
    let names = names.ok_or_else(|| RunError::MissingArtifact("run directory".into()))?;
    let summary = influence_training_summary(&runs, &names)?;
    write_summary_csv(create(out_csv)?, &summary)?;
    Ok(summary)
}

/// Critic predictions against Monte-Carlo returns on successful deterministic episodes.
pub fn returns_vs_predictions(
    checkpoint: &Path,
    config: Option<&Path>,
    episodes: usize,
    seed: u64,
    window: usize,
    out_csv: &Path,
) -> Result<AccuracyReport, RunError> {
    let (cfg, agent) = load_agent(checkpoint, config)?;
    let comps = agent.components();
    let decomposed = cfg.agent.variant.decomposed();
    let hw = agent.head_weights(agent.grad_steps);
    let mut traces = Vec::new();
    for s in episode_seeds(seed, episodes) {
        let ep = deterministic_episode(&cfg, &agent, s)?;
        if !ep.success {
            continue;
        }
        let g = mc_component_returns(&ep.rewards, cfg.agent.gamma).returns;
        let mut predictions = Vec::with_capacity(ep.len());
        for (state, action) in ep.states.iter().zip(&ep.actions) {
            let twin = min_composite_twin(&agent.critic, state, action, &hw)?;
            let q = agent.critic.online_q(
                twin,
                &Matrix::from_vec(1, state.len(), state.clone()),
                &Matrix::from_vec(1, action.len(), action.clone()),
            )?;
            predictions.push(q.row(0)[..if decomposed { comps.len() } else { 1 }].to_vec());
        }
        let returns = if decomposed {
            g
        } else {
            g.iter()
                .map(|r| vec![r.iter().zip(comps).map(|(v, c)| v * c.weight).sum()])
                .collect()
        };
        traces.push(PredictionTrace { predictions, returns });
    }
    let names: Vec<String> = if decomposed {
        comps.iter().map(|c| c.name.clone()).collect()
    } else {
        vec!["composite".into()]
    };
    if traces.is_empty() {
        return Err(RunError::MissingArtifact(format!(
            "successful episodes (none of {episodes} succeeded)"
        )));
    }
    let report = prediction_accuracy(&traces, &names, window)?;
    write_accuracy_csv(create(out_csv)?, &report)?;
    Ok(report)
}
