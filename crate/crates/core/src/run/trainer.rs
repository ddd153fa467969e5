//! Synchronous training loop: one gradient step per environment step once warm.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analysis::influence::{agent_influence, mean_fractional};
use crate::envs::Environment;
use crate::replay::{ReplayBuffer, Transition};
use crate::rollout::run_episode;
use crate::sacd::{Agent, StepMetrics};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{named, MetricRecord, MetricWriter};
use super::RunError;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:09}.ckpt")
}

/// Independent random streams derived from the run seed.
pub struct Streams {
    pub init: [u64; 3],
    pub env: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub update: ChaCha8Rng,
    pub probe: ChaCha8Rng,
    pub eval_seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        let init = [root.next_u64(), root.next_u64(), root.next_u64()];
        let mut next = || ChaCha8Rng::seed_from_u64(root.next_u64());
        let env = next();
        let explore = next();
        let replay = next();
        let update = next();
        let probe = next();
        let eval_seed = root.next_u64();
        Self {
            init,
            env,
            explore,
            replay,
            update,
            probe,
            eval_seed,
        }
    }
}

pub fn build_agent(config: &RunConfig, init: [u64; 3]) -> Result<Agent, RunError> {
    let spec = config.env_spec()?;
    Ok(Agent::new(
        config.agent.clone(),
        spec.obs_dim,
        spec.action_dim,
        config.resolved_components()?,
        init,
    )?)
}

/// Deterministic-action evaluation: mean per-component return, mean composite
/// under the base weights, and success rate.
pub fn evaluate_agent(
    agent: &Agent,
    env: &mut dyn Environment,
    episodes: usize,
    base_seed: u64,
) -> Result<(Vec<f64>, f64, f64), RunError> {
    let m = agent.components().len();
    let base: Vec<f64> = agent.components().iter().map(|c| c.weight).collect();
    let mut totals = vec![0.0; m];
    let mut successes = 0usize;
    for k in 0..episodes {
        let mut policy_err = None;
        let ep = run_episode(env, base_seed.wrapping_add(k as u64), |obs| {
            agent.policy.deterministic_action(obs).unwrap_or_else(|e| {
                policy_err = Some(e);
                vec![0.0; agent.policy.action_dim()]
            })
        })?;
        if let Some(e) = policy_err {
            return Err(e.into());
        }
        for (t, v) in totals.iter_mut().zip(ep.component_totals(m)) {
            *t += v / episodes as f64;
        }
        successes += usize::from(ep.success);
    }
    let composite = totals.iter().zip(&base).map(|(a, b)| a * b).sum();
    Ok((totals, composite, successes as f64 / episodes.max(1) as f64))
}

#[derive(Default)]
struct PeriodMeans {
    count: usize,
    critic: Vec<f64>,
    cagrad: Option<Vec<f64>>,
    alpha_loss: f64,
    policy_loss: f64,
    critic_grad_norm: f64,
    policy_grad_norm: f64,
    mean_log_prob: f64,
}

impl PeriodMeans {
    fn add(&mut self, m: &StepMetrics) {
        if self.count == 0 {
            self.critic = vec![0.0; m.critic_losses.len()];
            self.cagrad = m.cagrad_weights.as_ref().map(|w| vec![0.0; w.len()]);
        }
        self.count += 1;
        for (a, v) in self.critic.iter_mut().zip(&m.critic_losses) {
            *a += v;
        }
        if let (Some(acc), Some(w)) = (self.cagrad.as_mut(), m.cagrad_weights.as_ref()) {
            for (a, v) in acc.iter_mut().zip(w) {
                *a += v;
            }
        }
        self.alpha_loss += m.alpha_loss;
        self.policy_loss += m.policy_loss;
        self.critic_grad_norm += m.critic_grad_norm;
        self.policy_grad_norm += m.policy_grad_norm;
        self.mean_log_prob += m.mean_log_prob;
    }

    fn mean(v: &[f64], n: usize) -> Vec<f64> {
        v.iter().map(|x| x / n as f64).collect()
    }
}

#[derive(Serialize)]
struct TimingRecord {
    step: u64,
    elapsed_secs: f64,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<MetricRecord>,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub env_steps: u64,
    pub episodes: u64,
}

struct Artifacts {
    run_dir: PathBuf,
    metrics: Option<MetricWriter>,
    timing: Option<MetricWriter>,
    config_hash: [u8; 32],
}

impl Artifacts {
    fn checkpoint(&self, agent: &Agent) -> Result<(), RunError> {
        let path = self.run_dir.join(CHECKPOINT_DIR).join(checkpoint_name(agent.grad_steps));
        Checkpoint::from_agent(agent, self.config_hash).save(&path)
    }

    fn record(&mut self, rec: &MetricRecord, elapsed: f64) -> Result<(), RunError> {
        if self.metrics.is_none() {
            self.metrics = Some(MetricWriter::create(&self.run_dir.join(METRICS_LOG))?);
            self.timing = Some(MetricWriter::create(&self.run_dir.join(TIMING_LOG))?);
        }
        self.metrics.as_mut().expect("created above").write(rec)?;
        self.timing.as_mut().expect("created above").write(&TimingRecord {
            step: rec.step,
            elapsed_secs: elapsed,
        })
    }
}

/// Trains from `config`, writing the config snapshot, metric log, timing log
/// and checkpoints under `run_dir`.
pub fn train(config: &RunConfig, run_dir: &Path) -> Result<TrainOutcome, RunError> {
    config.validate()?;
    std::fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).map_err(|e| RunError::io(run_dir, e))?;
    let snapshot = config.to_toml_string()?;
    let snap_path = run_dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&snap_path, &snapshot).map_err(|e| RunError::io(&snap_path, e))?;
    let mut art = Artifacts {
        run_dir: run_dir.to_path_buf(),
        metrics: None,
        timing: None,
        config_hash: config.hash()?,
    };

    let start = Instant::now();
    let mut streams = Streams::new(config.seed);
    let mut agent = build_agent(config, streams.init)?;
    let mut env = config.env.build()?;
    let mut eval_env = config.env.build()?;
    let spec = env.spec();
    let names: Vec<String> = spec.component_names.clone();
    let head_names = agent.head_names();
    let mut buffer = ReplayBuffer::new(config.agent.replay_capacity, spec.num_components())?;

    art.checkpoint(&agent)?;
    let total = config.total_steps;
    let mut records = Vec::new();
    let mut period = PeriodMeans::default();
    let mut env_steps = 0u64;
    let mut episodes = 0u64;
    let mut obs = env.reset(streams.env.next_u64());

    while agent.grad_steps < total {
        let action: Vec<f64> = if (env_steps as usize) < config.agent.learning_starts {
            (0..spec.action_dim).map(|_| streams.explore.random_range(-1.0..1.0)).collect()
        } else {
            let noise: Vec<f64> = (0..spec.action_dim).map(|_| streams.explore.sample(StandardNormal)).collect();
            agent.policy.sample_action(&obs, &noise)?.action
        };
        let out = env.step(&action)?;
        env_steps += 1;
        let done = out.done();
        buffer.push(Transition {
            s: std::mem::take(&mut obs),
            a: action,
            r: out.reward_components,
            s_next: out.obs.clone(),
            terminated: out.terminated,
        })?;
        obs = if done {
            episodes += 1;
            env.reset(streams.env.next_u64())
        } else {
            out.obs
        };

        if (env_steps as usize) < config.agent.learning_starts || buffer.len() < config.agent.batch_size {
            continue;
        }
        let batch = buffer.sample_with(config.agent.batch_size, &mut streams.replay)?;
        let step_metrics = agent.update(&batch, &mut streams.update)?;
        period.add(&step_metrics);
        let step = agent.grad_steps;

        let eval_due = step % config.eval.period == 0 || step == total;
        if step % config.eval.log_period == 0 || eval_due {
            let n = period.count;
            let mut rec = MetricRecord {
                step,
                env_steps,
                episodes,
                critic_loss: named(&head_names, &PeriodMeans::mean(&period.critic, n)),
                cagrad_weight: period.cagrad.as_ref().map(|w| named(&head_names, &PeriodMeans::mean(w, n))),
                component_weight: named(&names, &agent.component_weights(step)),
                alpha: agent.alpha(),
                alpha_loss: period.alpha_loss / n as f64,
                policy_loss: period.policy_loss / n as f64,
                critic_grad_norm: period.critic_grad_norm / n as f64,
                policy_grad_norm: period.policy_grad_norm / n as f64,
                mean_log_prob: period.mean_log_prob / n as f64,
                eval_return: None,
                eval_composite: None,
                eval_success_rate: None,
                influence: None,
                influence_degenerate: None,
            };
            period = PeriodMeans::default();
            if eval_due {
                let (ret, comp, succ) =
                    evaluate_agent(&agent, eval_env.as_mut(), config.eval.episodes, streams.eval_seed)?;
                rec.eval_return = Some(named(&names, &ret));
                rec.eval_composite = Some(comp);
                rec.eval_success_rate = Some(succ);
                if config.eval.probe_states > 0 {
                    let idx = buffer.sample_indices(config.eval.probe_states, &mut streams.probe)?;
                    let hw = agent.head_weights(step);
                    let samples = idx
                        .iter()
                        .map(|&i| agent_influence(&agent.critic, &agent.policy, &buffer.get(i)?.s, &hw, 1.0).map_err(RunError::from))
                        .collect::<Result<Vec<_>, RunError>>()?;
                    let (mean, degenerate) = mean_fractional(&samples);
                    rec.influence = Some(named(&head_names, &mean));
                    rec.influence_degenerate = Some(degenerate);
                }
            }
            art.record(&rec, start.elapsed().as_secs_f64())?;
            records.push(rec);
        }
        let ck = config.eval.checkpoint_period;
        if (ck > 0 && step % ck == 0) || step == total {
            art.checkpoint(&agent)?;
        }
    }

    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        records,
        agent,
        buffer,
        env_steps,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(steps: u64) -> RunConfig {
        RunConfig::from_toml_str(&format!(
            "total_steps = {steps}\nseed = 3\n[env]\nname = \"gap_walker\"\n\
             [agent]\nvariant = \"sac_d_cagrad\"\nhidden_sizes = [8]\nbatch_size = 4\nlearning_starts = 10\n\
             [eval]\nperiod = 10\nlog_period = 5\nepisodes = 1\nprobe_states = 4\n"
        ))
        .unwrap()
    }

    #[test]
    fn zero_steps_leave_only_snapshot_and_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny(0), dir.path()).unwrap();
        assert!(out.records.is_empty());
        assert!(dir.path().join(CONFIG_SNAPSHOT).exists());
        assert!(!dir.path().join(METRICS_LOG).exists());
        let ckpts: Vec<_> = std::fs::read_dir(dir.path().join(CHECKPOINT_DIR)).unwrap().collect();
        assert_eq!(ckpts.len(), 1);
    }

    #[test]
    fn short_run_logs_periodically() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny(20), dir.path()).unwrap();
        assert_eq!(out.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
        assert!(out.records[1].eval_return.is_some() && out.records[0].eval_return.is_none());
        assert!(out.records[1].influence.is_some());
        assert!(out.records[0].cagrad_weight.is_some());
        assert_eq!(out.agent.grad_steps, 20);
        assert!(dir.path().join(CHECKPOINT_DIR).join(checkpoint_name(20)).exists());
    }
}
