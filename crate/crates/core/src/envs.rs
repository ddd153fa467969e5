//! Toy continuous-control environments with vector rewards.
//!
//! * [`LineLander`]: a 1-D lander. Touching down softly is not enough; the
//!   landing bonus arrives only after the craft has rested on the ground for
//!   `landing_hold_steps` consecutive steps, so without the optional rest
//!   trace the observation does not reveal how close the bonus is.
//! * [`GapWalker`]: a 1-D walker that earns forward progress but falls to a
//!   large failure penalty off a cliff behind it, into a gap ahead unless it
//!   crosses the gap at speed, or by tripping when it brakes hard while moving
//!   fast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called after the episode ended; call reset first")]
    StepAfterEnd,
    #[error("step called before reset")]
    NotReset,
    #[error("action has {got} entries, expected {expected}")]
    ActionShape { expected: usize, got: usize },
    #[error("action entry {index} is not finite ({value})")]
    NonFiniteAction { index: usize, value: f64 },
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub component_names: Vec<String>,
    pub default_weights: Vec<f64>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn num_components(&self) -> usize {
        self.component_names.len()
    }

    pub fn component_index(&self, name: &str) -> Option<usize> {
        self.component_names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedStepResult {
    pub obs: Vec<f64>,
    pub reward_components: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

impl DecomposedStepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<DecomposedStepResult, EnvError>;
    /// Whether the finished episode counts as a success (landing / surviving).
    fn succeeded(&self) -> bool;
}

fn check_action(action: &[f64], dim: usize) -> Result<(), EnvError> {
    if action.len() != dim {
        return Err(EnvError::ActionShape {
            expected: dim,
            got: action.len(),
        });
    }
    if let Some((index, &value)) = action.iter().enumerate().find(|(_, a)| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction { index, value });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EpisodeState {
    Fresh,
    Running,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineLanderConfig {
    pub gravity: f64,
    pub dt: f64,
    pub max_thrust: f64,
    pub fuel_cost_coeff: f64,
    pub crash_speed: f64,
    pub crash_penalty: f64,
    pub landing_reward: f64,
    pub landing_hold_steps: usize,
    pub velocity_shaping_coeff: f64,
    pub velocity_zero_threshold: f64,
    pub trace_normalizer: f64,
    pub include_v0_trace: bool,
    pub initial_height_min: f64,
    pub initial_height_max: f64,
    pub max_episode_steps: usize,
}

impl Default for LineLanderConfig {
    fn default() -> Self {
        Self {
            gravity: 1.0,
            dt: 0.1,
            max_thrust: 2.0,
            fuel_cost_coeff: 0.05,
            crash_speed: 1.0,
            crash_penalty: -100.0,
            landing_reward: 100.0,
            landing_hold_steps: 20,
            velocity_shaping_coeff: 0.1,
            velocity_zero_threshold: 1e-3,
            trace_normalizer: 40.0,
            include_v0_trace: false,
            initial_height_min: 5.0,
            initial_height_max: 10.0,
            max_episode_steps: 1000,
        }
    }
}

impl LineLanderConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| Err(EnvError::InvalidConfig(format!("line_lander: {msg}")));
        if self.landing_hold_steps < 1 {
            return bad("landing_hold_steps must be at least 1");
        }
        if !(self.trace_normalizer > 0.0) {
            return bad("trace_normalizer must be positive");
        }
        if !(self.dt > 0.0) || !(self.gravity > 0.0) || !(self.max_thrust > 0.0) {
            return bad("dt, gravity and max_thrust must be positive");
        }
        if self.crash_penalty >= 0.0 || self.landing_reward <= 0.0 {
            return bad("crash_penalty must be negative and landing_reward positive");
        }
        if self.fuel_cost_coeff < 0.0 || self.velocity_shaping_coeff < 0.0 {
            return bad("cost coefficients must be non-negative");
        }
        if !(self.initial_height_min > 0.0 && self.initial_height_min <= self.initial_height_max) {
            return bad("initial height range must be positive and ordered");
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive");
        }
        Ok(())
    }
}

pub const LINE_LANDER_COMPONENTS: [&str; 4] = ["landing", "crash", "main", "velocity"];

#[derive(Debug, Clone)]
pub struct LineLander {
    config: LineLanderConfig,
    height: f64,
    velocity: f64,
    steps: usize,
    steps_at_rest: usize,
    landed: bool,
    state: EpisodeState,
}

impl LineLander {
    pub fn new(config: LineLanderConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            height: 0.0,
            velocity: 0.0,
            steps: 0,
            steps_at_rest: 0,
            landed: false,
            state: EpisodeState::Fresh,
        })
    }

    pub fn config(&self) -> &LineLanderConfig {
        &self.config
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn velocity(&self) -> f64 {
        self.velocity
    }

    pub fn steps_at_rest(&self) -> usize {
        self.steps_at_rest
    }

    /// Places the craft at an arbitrary state (for tests and scripted probes).
    pub fn set_state(&mut self, height: f64, velocity: f64) {
        self.height = height.max(0.0);
        self.velocity = velocity;
        self.steps_at_rest = 0;
        self.state = EpisodeState::Running;
    }

    /// Action that exactly cancels gravity.
    pub fn hover_action(&self) -> f64 {
        2.0 * self.config.gravity / self.config.max_thrust - 1.0
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![self.height, self.velocity];
        if self.config.include_v0_trace {
            let c = self.config.trace_normalizer;
            obs.push((self.steps_at_rest as f64).min(10.0 * c) / c);
        }
        obs
    }
}

impl Environment for LineLander {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: if self.config.include_v0_trace { 3 } else { 2 },
            action_dim: 1,
            component_names: LINE_LANDER_COMPONENTS.iter().map(|s| s.to_string()).collect(),
            default_weights: vec![1.0; LINE_LANDER_COMPONENTS.len()],
            max_episode_steps: self.config.max_episode_steps,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (self.config.initial_height_min, self.config.initial_height_max);
        self.height = if hi > lo { rng.random_range(lo..hi) } else { lo };
        self.velocity = 0.0;
        self.steps = 0;
        self.steps_at_rest = 0;
        self.landed = false;
        self.state = EpisodeState::Running;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<DecomposedStepResult, EnvError> {
        match self.state {
            EpisodeState::Fresh => return Err(EnvError::NotReset),
            EpisodeState::Ended => return Err(EnvError::StepAfterEnd),
            EpisodeState::Running => {}
        }
        check_action(action, 1)?;
        let cfg = &self.config;
        let u = action[0].clamp(-1.0, 1.0);
        let thrust = cfg.max_thrust * (u + 1.0) / 2.0;
        let accel = thrust - cfg.gravity;

        let mut rewards = [0.0; 4];
        rewards[2] = -cfg.fuel_cost_coeff * thrust;
        let mut terminated = false;

        let v_old = self.velocity;
        let mut h = self.height + v_old * cfg.dt;
        let mut v = v_old + accel * cfg.dt;
        if h <= 0.0 {
            if self.height > 0.0 || v_old < 0.0 {
                // touchdown
                if v_old.abs() > cfg.crash_speed {
                    rewards[1] = cfg.crash_penalty;
                    terminated = true;
                }
                h = 0.0;
                v = 0.0;
            } else {
                // already on the ground: the ground holds the craft unless thrust lifts it
                h = 0.0;
                v = v.max(0.0);
            }
        }
        self.height = h;
        self.velocity = v;
        rewards[3] = -cfg.velocity_shaping_coeff * v.abs();

        if !terminated {
            if h == 0.0 && v.abs() < cfg.velocity_zero_threshold {
                self.steps_at_rest += 1;
            } else {
                self.steps_at_rest = 0;
            }
            if self.steps_at_rest == cfg.landing_hold_steps + 1 {
                rewards[0] = cfg.landing_reward;
                self.landed = true;
                terminated = true;
            }
        }

        self.steps += 1;
        let truncated = !terminated && self.steps >= cfg.max_episode_steps;
        if terminated || truncated {
            self.state = EpisodeState::Ended;
        }
        Ok(DecomposedStepResult {
            obs: self.observation(),
            reward_components: rewards.to_vec(),
            terminated,
            truncated,
        })
    }

    fn succeeded(&self) -> bool {
        self.landed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapWalkerConfig {
    pub dt: f64,
    pub accel: f64,
    pub max_speed: f64,
    pub control_cost_coeff: f64,
    pub failure_penalty: f64,
    pub cliff_position: f64,
    pub gap_start: f64,
    pub gap_end: f64,
    pub jump_speed: f64,
    /// Braking with `|u| >= trip_brake` at `|v| >= trip_speed` is a fall.
    pub trip_speed: f64,
    pub trip_brake: f64,
    pub start_spread: f64,
    pub position_scale: f64,
    pub horizon: usize,
}

impl Default for GapWalkerConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            accel: 1.0,
            max_speed: 3.0,
            control_cost_coeff: 0.01,
            failure_penalty: -100.0,
            cliff_position: -1.0,
            gap_start: 1.0,
            gap_end: 2.0,
            jump_speed: 1.3,
            trip_speed: 0.5,
            trip_brake: 0.5,
            start_spread: 0.25,
            position_scale: 10.0,
            horizon: 200,
        }
    }
}

impl GapWalkerConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| Err(EnvError::InvalidConfig(format!("gap_walker: {msg}")));
        if !(self.failure_penalty < 0.0) {
            return bad("failure_penalty must be negative");
        }
        if !(self.dt > 0.0 && self.accel > 0.0 && self.max_speed > 0.0 && self.position_scale > 0.0)
        {
            return bad("dt, accel, max_speed and position_scale must be positive");
        }
        if !(self.cliff_position < -self.start_spread
            && self.start_spread >= 0.0
            && self.start_spread < self.gap_start
            && self.gap_start < self.gap_end)
        {
            return bad("expected cliff < start region < gap_start < gap_end");
        }
        if self.control_cost_coeff < 0.0 || self.jump_speed < 0.0 {
            return bad("control_cost_coeff and jump_speed must be non-negative");
        }
        if !(self.trip_speed > 0.0 && self.trip_brake > 0.0) {
            return bad("trip_speed and trip_brake must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        Ok(())
    }
}

pub const GAP_WALKER_COMPONENTS: [&str; 3] = ["forward", "control", "failure"];

#[derive(Debug, Clone)]
pub struct GapWalker {
    config: GapWalkerConfig,
    position: f64,
    velocity: f64,
    steps: usize,
    failed: bool,
    state: EpisodeState,
}

impl GapWalker {
    pub fn new(config: GapWalkerConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            position: 0.0,
            velocity: 0.0,
            steps: 0,
            failed: false,
            state: EpisodeState::Fresh,
        })
    }

    pub fn config(&self) -> &GapWalkerConfig {
        &self.config
    }

    pub fn position(&self) -> f64 {
        self.position
    }

    pub fn velocity(&self) -> f64 {
        self.velocity
    }

    pub fn failed(&self) -> bool {
        self.failed
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.position / self.config.position_scale, self.velocity]
    }
}

impl Environment for GapWalker {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 2,
            action_dim: 1,
            component_names: GAP_WALKER_COMPONENTS.iter().map(|s| s.to_string()).collect(),
            default_weights: vec![1.0; GAP_WALKER_COMPONENTS.len()],
            max_episode_steps: self.config.horizon,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = self.config.start_spread;
        self.position = if spread > 0.0 {
            rng.random_range(-spread..spread)
        } else {
            0.0
        };
        self.velocity = 0.0;
        self.steps = 0;
        self.failed = false;
        self.state = EpisodeState::Running;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<DecomposedStepResult, EnvError> {
        match self.state {
            EpisodeState::Fresh => return Err(EnvError::NotReset),
            EpisodeState::Ended => return Err(EnvError::StepAfterEnd),
            EpisodeState::Running => {}
        }
        check_action(action, 1)?;
        let cfg = &self.config;
        let u = action[0].clamp(-1.0, 1.0);
        let v_old = self.velocity;
        let x_new = self.position + v_old * cfg.dt;
        let v_new = (v_old + u * cfg.accel * cfg.dt).clamp(-cfg.max_speed, cfg.max_speed);

        let forward = x_new - self.position;
        let control = -cfg.control_cost_coeff * u * u;
        let in_gap = x_new >= cfg.gap_start && x_new <= cfg.gap_end && v_old.abs() < cfg.jump_speed;
        let tripped = u * v_old < 0.0 && v_old.abs() >= cfg.trip_speed && u.abs() >= cfg.trip_brake;
        let fell = x_new < cfg.cliff_position || in_gap || tripped;
        let failure = if fell { cfg.failure_penalty } else { 0.0 };

        self.position = x_new;
        self.velocity = v_new;
        self.steps += 1;
        self.failed = fell;
        let terminated = fell;
        let truncated = !terminated && self.steps >= cfg.horizon;
        if terminated || truncated {
            self.state = EpisodeState::Ended;
        }
        Ok(DecomposedStepResult {
            obs: self.observation(),
            reward_components: vec![forward, control, failure],
            terminated,
            truncated,
        })
    }

    fn succeeded(&self) -> bool {
        self.state == EpisodeState::Ended && !self.failed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    LineLander,
    GapWalker,
}

/// `[env]` section of a run config: a name plus optional constant overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_lander: Option<LineLanderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_walker: Option<GapWalkerConfig>,
}

impl EnvConfig {
    pub fn line_lander(config: LineLanderConfig) -> Self {
        Self {
            name: EnvName::LineLander,
            line_lander: Some(config),
            gap_walker: None,
        }
    }

    pub fn gap_walker(config: GapWalkerConfig) -> Self {
        Self {
            name: EnvName::GapWalker,
            line_lander: None,
            gap_walker: Some(config),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        match self.name {
            EnvName::LineLander => {
                if self.gap_walker.is_some() {
                    return Err(EnvError::InvalidConfig(
                        "gap_walker overrides given for line_lander".into(),
                    ));
                }
                Ok(Box::new(LineLander::new(
                    self.line_lander.clone().unwrap_or_default(),
                )?))
            }
            EnvName::GapWalker => {
                if self.line_lander.is_some() {
                    return Err(EnvError::InvalidConfig(
                        "line_lander overrides given for gap_walker".into(),
                    ));
                }
                Ok(Box::new(GapWalker::new(
                    self.gap_walker.clone().unwrap_or_default(),
                )?))
            }
        }
    }
}
