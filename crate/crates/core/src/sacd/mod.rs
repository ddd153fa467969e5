//! Decomposed soft actor-critic: SAC, SAC-D-Naive, SAC-D and SAC-D-CAGrad.
//!
//! The critic has one output head per reward component plus a final head for
//! the discounted entropy bonus. Plain SAC is the single-head special case
//! whose reward is the weighted composite.

pub mod tabular;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{
    backward_batch, forward_batch, mlp_init, AdamConfig, AdamState, ForwardCache, Matrix,
    MlpError, MlpSpec, OptimError, ParameterVector,
};
use crate::gradsurgery::{
    cagrad_direction, cagrad_weights, DirectionRule, GradSurgeryError, HeadGradients,
    SolverConfig,
};
use crate::policy::PolicyNetwork;
use crate::replay::Batch;
use crate::shaping::{clip_target, sign_penalty, sign_penalty_grad, ComponentSpec, Sign, ShapingError};

#[derive(Debug, Error)]
pub enum SacdError {
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    GradSurgery(#[from] GradSurgeryError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error("non-finite {what} for component `{component}`")]
    NonFinite { what: &'static str, component: String },
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("batch has {got} reward components, agent expects {expected}")]
    ComponentMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sac,
    SacDNaive,
    #[default]
    SacD,
    SacDCagrad,
}

impl Variant {
    pub fn decomposed(self) -> bool {
        self != Variant::Sac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    /// Target-network EMA rate.
    pub tau: f64,
    pub hidden_sizes: Vec<usize>,
    pub init_alpha: f64,
    pub learn_alpha: bool,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    pub cagrad_c: f64,
    pub cagrad_solver: SolverConfig,
    pub hidden_gradient_division: bool,
    pub paper_literal_entropy_sign: bool,
    pub original_cagrad_direction: bool,
    pub replay_capacity: usize,
    /// Environment steps of uniform-random actions before updates begin.
    pub learning_starts: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SacD,
            gamma: 0.99,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            batch_size: 256,
            tau: 5e-3,
            hidden_sizes: vec![256, 256],
            init_alpha: 1.0,
            learn_alpha: true,
            target_entropy: None,
            cagrad_c: 0.5,
            cagrad_solver: SolverConfig::default(),
            hidden_gradient_division: true,
            paper_literal_entropy_sign: false,
            original_cagrad_direction: false,
            replay_capacity: 1_000_000,
            learning_starts: 1000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), SacdError> {
        let bad = |m: String| Err(SacdError::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch_size and replay_capacity must be positive".into());
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be non-empty and positive".into());
        }
        if !(self.init_alpha > 0.0) {
            return bad("init_alpha must be positive".into());
        }
        if !(self.cagrad_c >= 0.0) {
            return bad("cagrad_c must be non-negative".into());
        }
        Ok(())
    }
}

/// Entropy bonus treated as an extra reward component:
/// `-gamma * alpha * (1 - d) * log pi(a'|s')`, or the sign-flipped literal form.
pub fn entropy_component_reward(
    next_log_probs: &[f64],
    terminated: &[bool],
    alpha: f64,
    gamma: f64,
    literal_sign: bool,
) -> Vec<f64> {
    let sign = if literal_sign { 1.0 } else { -1.0 };
    next_log_probs
        .iter()
        .zip(terminated)
        .map(|(lp, &d)| if d { 0.0 } else { sign * gamma * alpha * lp })
        .collect()
}

/// Row-wise composite `sum_i w_i q_i`.
pub fn composite(q: &Matrix, w: &[f64]) -> Vec<f64> {
    (0..q.rows())
        .map(|r| q.row(r).iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

/// Index (0 or 1) of the twin with the smaller composite per row; ties go to 0.
pub fn select_target_network(q1: &Matrix, q2: &Matrix, w: &[f64]) -> Vec<usize> {
    composite(q1, w)
        .into_iter()
        .zip(composite(q2, w))
        .map(|(c1, c2)| usize::from(c2 < c1))
        .collect()
}

pub fn selected_values(q1: &Matrix, q2: &Matrix, choice: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(q1.rows(), q1.cols());
    for (r, &j) in choice.iter().enumerate() {
        let src = if j == 0 { q1.row(r) } else { q2.row(r) };
        out.row_mut(r).copy_from_slice(src);
    }
    out
}

pub fn elementwise_min(q1: &Matrix, q2: &Matrix) -> Matrix {
    let data = q1
        .as_slice()
        .iter()
        .zip(q2.as_slice())
        .map(|(a, b)| a.min(*b))
        .collect();
    Matrix::from_vec(q1.rows(), q1.cols(), data)
}

/// `y_i = r_i + gamma (1 - d) q_next_i`, clipped where a sign is given.
pub fn component_targets(
    rewards: &Matrix,
    next_values: &Matrix,
    terminated: &[bool],
    gamma: f64,
    clip: &[Sign],
) -> Matrix {
    let mut y = Matrix::zeros(rewards.rows(), rewards.cols());
    for r in 0..rewards.rows() {
        let discount = if terminated[r] { 0.0 } else { gamma };
        for i in 0..rewards.cols() {
            let raw = rewards.get(r, i) + discount * next_values.get(r, i);
            y.set(r, i, clip_target(clip.get(i).copied().unwrap_or(Sign::Free), raw));
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticLoss {
    /// `LQ_i`: batch mean of both twins' squared errors plus sign penalties.
    pub per_head: Vec<f64>,
    /// `d LQ_i / d Q_i(row)` for each twin.
    pub dq: [Matrix; 2],
}

pub fn critic_loss(q: [&Matrix; 2], y: &Matrix, penalty: &[Sign]) -> CriticLoss {
    let (rows, cols) = (y.rows(), y.cols());
    let inv_b = 1.0 / rows as f64;
    let mut per_head = vec![0.0; cols];
    let mut dq = [Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)];
    for (twin, qm) in q.iter().enumerate() {
        for r in 0..rows {
            for i in 0..cols {
                let sign = penalty.get(i).copied().unwrap_or(Sign::Free);
                let qv = qm.get(r, i);
                let err = qv - y.get(r, i);
                per_head[i] += (0.5 * err * err + sign_penalty(sign, qv)) * inv_b;
                dq[twin].set(r, i, (err + sign_penalty_grad(sign, qv)) * inv_b);
            }
        }
    }
    CriticLoss { per_head, dq }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub loss: f64,
    /// `d L / d log pi(u|s)` per row.
    pub dlogp: Vec<f64>,
    /// `d L / d Q_i(s, u)` for each twin.
    pub dq: [Matrix; 2],
}

/// `mean_b [alpha log pi(u|s) - min_j sum_i w_i Q_i(s, u; theta_j)]`.
pub fn policy_loss(log_probs: &[f64], q: [&Matrix; 2], w: &[f64], alpha: f64) -> PolicyLoss {
    let rows = log_probs.len();
    let cols = q[0].cols();
    let inv_b = 1.0 / rows as f64;
    let choice = select_target_network(q[0], q[1], w);
    let c1 = composite(q[0], w);
    let c2 = composite(q[1], w);
    let mut loss = 0.0;
    let mut dq = [Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)];
    for r in 0..rows {
        let j = choice[r];
        let m = if j == 0 { c1[r] } else { c2[r] };
        loss += (alpha * log_probs[r] - m) * inv_b;
        for (i, wi) in w.iter().enumerate() {
            dq[j].set(r, i, -wi * inv_b);
        }
    }
    PolicyLoss {
        loss,
        dlogp: vec![alpha * inv_b; rows],
        dq,
    }
}

/// `L = -alpha * mean(log pi + target_entropy)` and its derivative in `log alpha`.
pub fn alpha_loss(log_alpha: f64, log_probs: &[f64], target_entropy: f64) -> (f64, f64) {
    let alpha = log_alpha.exp();
    let mean = log_probs.iter().map(|lp| lp + target_entropy).sum::<f64>() / log_probs.len() as f64;
    (-alpha * mean, -alpha * mean)
}

fn critic_input(obs: &Matrix, actions: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(obs.rows() * (obs.cols() + actions.cols()));
    for r in 0..obs.rows() {
        out.extend_from_slice(obs.row(r));
        out.extend_from_slice(actions.row(r));
    }
    out
}

/// Twin multi-head Q-networks and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedCritic {
    spec: MlpSpec,
    obs_dim: usize,
    action_dim: usize,
    online: [ParameterVector; 2],
    target: [ParameterVector; 2],
}

impl DecomposedCritic {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        heads: usize,
        hidden_sizes: Vec<usize>,
        seeds: [u64; 2],
    ) -> Result<Self, MlpError> {
        let spec = MlpSpec::new(obs_dim + action_dim, hidden_sizes, heads)?;
        let online = [mlp_init(&spec, seeds[0]), mlp_init(&spec, seeds[1])];
        let target = online.clone();
        Ok(Self {
            spec,
            obs_dim,
            action_dim,
            online,
            target,
        })
    }

    pub fn from_parts(
        spec: MlpSpec,
        action_dim: usize,
        online: [ParameterVector; 2],
        target: [ParameterVector; 2],
    ) -> Result<Self, MlpError> {
        if action_dim >= spec.input_dim() {
            return Err(MlpError::InvalidSpec(
                "critic input must hold an observation and an action".into(),
            ));
        }
        for p in online.iter().chain(&target) {
            if p.len() != spec.num_params() {
                return Err(MlpError::ParamShape {
                    expected: spec.num_params(),
                    got: p.len(),
                });
            }
        }
        Ok(Self {
            obs_dim: spec.input_dim() - action_dim,
            spec,
            action_dim,
            online,
            target,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn heads(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn online(&self, twin: usize) -> &ParameterVector {
        &self.online[twin]
    }

    pub fn online_mut(&mut self, twin: usize) -> &mut ParameterVector {
        &mut self.online[twin]
    }

    pub fn target(&self, twin: usize) -> &ParameterVector {
        &self.target[twin]
    }

    pub fn target_mut(&mut self, twin: usize) -> &mut ParameterVector {
        &mut self.target[twin]
    }

    /// Online parameters of both twins, concatenated.
    pub fn online_flat(&self) -> Vec<f64> {
        let mut v = self.online[0].to_vec();
        v.extend_from_slice(&self.online[1]);
        v
    }

    pub fn set_online_flat(&mut self, flat: &[f64]) {
        let n = self.spec.num_params();
        self.online[0].copy_from_slice(&flat[..n]);
        self.online[1].copy_from_slice(&flat[n..2 * n]);
    }

    pub fn q_values(
        &self,
        params: &[f64],
        obs: &Matrix,
        actions: &Matrix,
    ) -> Result<Matrix, MlpError> {
        let cache = self.forward(params, obs, actions)?;
        Ok(Matrix::from_vec(obs.rows(), self.heads(), cache.into_output()))
    }

    fn forward(&self, params: &[f64], obs: &Matrix, actions: &Matrix) -> Result<ForwardCache, MlpError> {
        forward_batch(params, &self.spec, &critic_input(obs, actions), obs.rows())
    }

    pub fn online_q(&self, twin: usize, obs: &Matrix, actions: &Matrix) -> Result<Matrix, MlpError> {
        self.q_values(&self.online[twin], obs, actions)
    }

    pub fn target_q(&self, twin: usize, obs: &Matrix, actions: &Matrix) -> Result<Matrix, MlpError> {
        self.q_values(&self.target[twin], obs, actions)
    }

    /// `d/da sum_i head_weights_i Q_i(s, a; theta_twin)` for a single state-action pair.
    pub fn action_gradient(
        &self,
        twin: usize,
        state: &[f64],
        action: &[f64],
        head_weights: &[f64],
    ) -> Result<Vec<f64>, MlpError> {
        let obs = Matrix::from_vec(1, state.len(), state.to_vec());
        let act = Matrix::from_vec(1, action.len(), action.to_vec());
        let cache = self.forward(&self.online[twin], &obs, &act)?;
        let mut grad_in = vec![0.0; self.spec.input_dim()];
        backward_batch(
            &self.online[twin],
            &self.spec,
            &cache,
            head_weights,
            None,
            Some(&mut grad_in),
        )?;
        Ok(grad_in[self.obs_dim..].to_vec())
    }

    /// `target <- (1 - tau) target + tau online`.
    pub fn soft_update(&mut self, tau: f64) {
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            for (a, b) in t.iter_mut().zip(o.iter()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }

    /// Gradient over both twins' parameters of `sum_i coeffs_i LQ_i`, given the
    /// per-twin caches and `dLQ_i/dQ` from [`critic_loss`].
    fn weighted_loss_gradient(
        &self,
        caches: &[ForwardCache; 2],
        dq: &[Matrix; 2],
        coeffs: &[f64],
    ) -> Result<Vec<f64>, MlpError> {
        let n = self.spec.num_params();
        let mut grad = vec![0.0; 2 * n];
        let (g1, g2) = grad.split_at_mut(n);
        for (twin, g) in [g1, g2].into_iter().enumerate() {
            let mut up = dq[twin].as_slice().to_vec();
            let cols = self.heads();
            for (k, u) in up.iter_mut().enumerate() {
                *u *= coeffs[k % cols];
            }
            backward_batch(&self.online[twin], &self.spec, &caches[twin], &up, Some(g), None)?;
        }
        Ok(grad)
    }

    /// Online Q-values at `(obs, actions)` with the caches needed for gradients.
    fn forward_online(
        &self,
        obs: &Matrix,
        actions: &Matrix,
    ) -> Result<([ForwardCache; 2], [Matrix; 2]), MlpError> {
        let c1 = self.forward(&self.online[0], obs, actions)?;
        let c2 = self.forward(&self.online[1], obs, actions)?;
        let q1 = Matrix::from_vec(obs.rows(), self.heads(), c1.output().to_vec());
        let q2 = Matrix::from_vec(obs.rows(), self.heads(), c2.output().to_vec());
        Ok(([c1, c2], [q1, q2]))
    }

    /// Per-head losses and the gradient of `sum_i coeffs_i LQ_i` over both twins.
    pub fn loss_gradient(
        &self,
        obs: &Matrix,
        actions: &Matrix,
        y: &Matrix,
        penalty: &[Sign],
        coeffs: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), MlpError> {
        let (caches, q) = self.forward_online(obs, actions)?;
        let loss = critic_loss([&q[0], &q[1]], y, penalty);
        let grad = self.weighted_loss_gradient(&caches, &loss.dq, coeffs)?;
        Ok((loss.per_head, grad))
    }

    /// `d/da` of `sum_rows sum_i upstream(row, i) Q_i(s_row, a_row; theta_twin)` for each row.
    fn action_gradients(
        &self,
        twin: usize,
        cache: &ForwardCache,
        upstream: &Matrix,
    ) -> Result<Vec<f64>, MlpError> {
        let rows = upstream.rows();
        let in_dim = self.spec.input_dim();
        let mut grad_in = vec![0.0; rows * in_dim];
        backward_batch(
            &self.online[twin],
            &self.spec,
            cache,
            upstream.as_slice(),
            None,
            Some(&mut grad_in),
        )?;
        let mut out = Vec::with_capacity(rows * self.action_dim);
        for r in 0..rows {
            out.extend_from_slice(&grad_in[r * in_dim + self.obs_dim..(r + 1) * in_dim]);
        }
        Ok(out)
    }
}

/// Policy loss and its parameter gradient through reparameterised actions.
pub fn policy_loss_gradient(
    policy: &PolicyNetwork,
    critic: &DecomposedCritic,
    obs: &Matrix,
    noise: &[f64],
    head_weights: &[f64],
    alpha: f64,
) -> Result<(PolicyLoss, ParameterVector, Vec<f64>), MlpError> {
    let batch = obs.rows();
    let sample = policy.sample_batch(obs.as_slice(), noise, batch)?;
    let actions = Matrix::from_vec(batch, policy.action_dim(), sample.actions.clone());
    let (caches, q) = critic.forward_online(obs, &actions)?;
    let loss = policy_loss(&sample.log_probs, [&q[0], &q[1]], head_weights, alpha);
    let mut dact = critic.action_gradients(0, &caches[0], &loss.dq[0])?;
    let d2 = critic.action_gradients(1, &caches[1], &loss.dq[1])?;
    for (a, b) in dact.iter_mut().zip(d2) {
        *a += b;
    }
    let grad = policy.backward(&sample, &dact, &loss.dlogp)?;
    Ok((loss, grad, sample.log_probs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub critic_losses: Vec<f64>,
    pub cagrad_weights: Option<Vec<f64>>,
    pub head_weights: Vec<f64>,
    pub alpha: f64,
    pub alpha_loss: f64,
    pub policy_loss: f64,
    pub critic_grad_norm: f64,
    pub policy_grad_norm: f64,
    pub mean_log_prob: f64,
}

/// Everything trained by one update step.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    components: Vec<ComponentSpec>,
    pub policy: PolicyNetwork,
    pub critic: DecomposedCritic,
    pub policy_opt: AdamState,
    pub critic_opt: AdamState,
    pub alpha_opt: AdamState,
    pub log_alpha: f64,
    pub grad_steps: u64,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Agent {
    /// `seeds` initialise the policy and the two critic twins.
    pub fn new(
        config: AgentConfig,
        obs_dim: usize,
        action_dim: usize,
        components: Vec<ComponentSpec>,
        seeds: [u64; 3],
    ) -> Result<Self, SacdError> {
        config.validate()?;
        if components.is_empty() {
            return Err(SacdError::InvalidConfig("at least one reward component required".into()));
        }
        for c in &components {
            c.validate()?;
            if !config.variant.decomposed() && !c.constraints.is_empty() {
                return Err(SacdError::InvalidConfig(format!(
                    "component `{}`: sign constraints need a decomposed variant",
                    c.name
                )));
            }
        }
        let heads = if config.variant.decomposed() {
            components.len() + 1
        } else {
            1
        };
        let policy = PolicyNetwork::new(obs_dim, action_dim, config.hidden_sizes.clone(), seeds[0])?;
        let critic = DecomposedCritic::new(
            obs_dim,
            action_dim,
            heads,
            config.hidden_sizes.clone(),
            [seeds[1], seeds[2]],
        )?;
        let adam = AdamConfig::default();
        Ok(Self {
            policy_opt: AdamState::new(policy.params().len(), adam),
            critic_opt: AdamState::new(2 * critic.spec().num_params(), adam),
            alpha_opt: AdamState::new(1, adam),
            log_alpha: config.init_alpha.ln(),
            grad_steps: 0,
            config,
            components,
            policy,
            critic,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.policy.action_dim() as f64))
    }

    /// Environmental component weights after `step` gradient steps.
    pub fn component_weights(&self, step: u64) -> Vec<f64> {
        self.components.iter().map(|c| c.weight_at(step)).collect()
    }

    /// Weights applied to the critic heads: the component weights plus 1 for
    /// the entropy head, or `[1]` for single-head SAC.
    pub fn head_weights(&self, step: u64) -> Vec<f64> {
        if self.config.variant.decomposed() {
            let mut w = self.component_weights(step);
            w.push(1.0);
            w
        } else {
            vec![1.0]
        }
    }

    pub fn head_names(&self) -> Vec<String> {
        if self.config.variant.decomposed() {
            let mut names: Vec<String> = self.components.iter().map(|c| c.name.clone()).collect();
            names.push("entropy".into());
            names
        } else {
            vec!["composite".into()]
        }
    }

    fn head_signs(&self, clip: bool) -> Vec<Sign> {
        if !self.config.variant.decomposed() {
            return vec![Sign::Free];
        }
        let mut v: Vec<Sign> = self
            .components
            .iter()
            .map(|c| {
                let on = if clip { c.clips_target() } else { c.penalized() };
                if on {
                    c.sign
                } else {
                    Sign::Free
                }
            })
            .collect();
        v.push(Sign::Free);
        v
    }

    /// Rewards per head: raw components plus the entropy column, or the
    /// weighted composite plus entropy for SAC.
    fn head_rewards(&self, batch: &Batch, entropy: &[f64], step: u64) -> Matrix {
        let rows = batch.len();
        if self.config.variant.decomposed() {
            let m = self.components.len();
            let mut r = Matrix::zeros(rows, m + 1);
            for b in 0..rows {
                r.row_mut(b)[..m].copy_from_slice(batch.rewards.row(b));
                r.set(b, m, entropy[b]);
            }
            r
        } else {
            let w = self.component_weights(step);
            let data = (0..rows)
                .map(|b| {
                    batch.rewards.row(b).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + entropy[b]
                })
                .collect();
            Matrix::from_vec(rows, 1, data)
        }
    }

    /// Component targets `y` for a batch, given noise for the next-state actions.
    pub fn compute_targets(&self, batch: &Batch, next_noise: &[f64]) -> Result<Matrix, SacdError> {
        let step = self.grad_steps;
        let rows = batch.len();
        let next = self.policy.sample_batch(batch.next_obs.as_slice(), next_noise, rows)?;
        let next_actions = Matrix::from_vec(rows, self.policy.action_dim(), next.actions.clone());
        let entropy = entropy_component_reward(
            &next.log_probs,
            &batch.terminated,
            self.alpha(),
            self.config.gamma,
            self.config.paper_literal_entropy_sign,
        );
        let rewards = self.head_rewards(batch, &entropy, step);
        let qt1 = self.critic.target_q(0, &batch.next_obs, &next_actions)?;
        let qt2 = self.critic.target_q(1, &batch.next_obs, &next_actions)?;
        let next_values = match self.config.variant {
            Variant::SacDNaive => elementwise_min(&qt1, &qt2),
            _ => {
                let w = self.head_weights(step);
                selected_values(&qt1, &qt2, &select_target_network(&qt1, &qt2, &w))
            }
        };
        Ok(component_targets(
            &rewards,
            &next_values,
            &batch.terminated,
            self.config.gamma,
            &self.head_signs(true),
        ))
    }

    fn check_finite(&self, values: &[f64], what: &'static str) -> Result<(), SacdError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let names = self.head_names();
            return Err(SacdError::NonFinite {
                what,
                component: names.get(i).cloned().unwrap_or_else(|| "policy".into()),
            });
        }
        Ok(())
    }

    /// One gradient step on critic, policy and temperature from a minibatch.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<StepMetrics, SacdError> {
        let m = self.components.len();
        if batch.rewards.cols() != m {
            return Err(SacdError::ComponentMismatch {
                expected: m,
                got: batch.rewards.cols(),
            });
        }
        let rows = batch.len();
        let d = self.policy.action_dim();
        let next_noise: Vec<f64> = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
        let noise: Vec<f64> = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();

        let step = self.grad_steps;
        let head_w = self.head_weights(step);
        let heads = head_w.len();
        let alpha = self.alpha();

        let y = self.compute_targets(batch, &next_noise)?;
        let (caches, q) = self.critic.forward_online(&batch.obs, &batch.actions)?;
        let loss = critic_loss([&q[0], &q[1]], &y, &self.head_signs(false));
        self.check_finite(&loss.per_head, "critic loss")?;

        let mut cagrad_w = None;
        let critic_grad = if self.config.variant == Variant::SacDCagrad {
            let per_head = (0..heads)
                .map(|i| {
                    let mut e = vec![0.0; heads];
                    e[i] = 1.0;
                    self.critic.weighted_loss_gradient(&caches, &loss.dq, &e)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let grads = HeadGradients::new(per_head)?;
            let w = cagrad_weights(&grads, self.config.cagrad_c, &self.config.cagrad_solver)?;
            let rule = if self.config.original_cagrad_direction {
                DirectionRule::Original
            } else {
                DirectionRule::Weighted
            };
            let dir = cagrad_direction(&grads, &w, self.config.cagrad_c, rule)?;
            cagrad_w = Some(w);
            dir
        } else {
            let coeffs = vec![1.0 / heads as f64; heads];
            let mut g = self.critic.weighted_loss_gradient(&caches, &loss.dq, &coeffs)?;
            if self.config.variant.decomposed() && self.config.hidden_gradient_division {
                let n = self.critic.spec().num_params();
                let trunk = self.critic.spec().trunk_len();
                for twin in 0..2 {
                    for v in &mut g[twin * n..twin * n + trunk] {
                        *v /= heads as f64;
                    }
                }
            }
            g
        };

        let (ploss, policy_grad, log_probs) =
            policy_loss_gradient(&self.policy, &self.critic, &batch.obs, &noise, &head_w, alpha)?;
        if !ploss.loss.is_finite() {
            return Err(SacdError::NonFinite {
                what: "policy loss",
                component: "policy".into(),
            });
        }
        let (aloss, dlog_alpha) = alpha_loss(self.log_alpha, &log_probs, self.target_entropy());

        let mut flat = self.critic.online_flat();
        self.critic_opt.step(&mut flat, &critic_grad, self.config.critic_lr)?;
        self.critic.set_online_flat(&flat);
        self.policy_opt
            .step(self.policy.params_mut(), &policy_grad, self.config.actor_lr)?;
        if self.config.learn_alpha {
            let mut la = [self.log_alpha];
            self.alpha_opt.step(&mut la, &[dlog_alpha], self.config.actor_lr)?;
            self.log_alpha = la[0];
        }
        self.critic.soft_update(self.config.tau);
        self.grad_steps += 1;

        Ok(StepMetrics {
            critic_losses: loss.per_head,
            cagrad_weights: cagrad_w,
            head_weights: head_w,
            alpha,
            alpha_loss: aloss,
            policy_loss: ploss.loss,
            critic_grad_norm: l2(&critic_grad),
            policy_grad_norm: l2(&policy_grad),
            mean_log_prob: log_probs.iter().sum::<f64>() / rows as f64,
        })
    }
}
