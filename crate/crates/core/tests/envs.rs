use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sacd_core::envs::{Environment, GapWalker, GapWalkerConfig, LineLander, LineLanderConfig};

/// Scalar-reward lander written from the dynamics description alone.
struct ScalarLander {
    cfg: LineLanderConfig,
    h: f64,
    v: f64,
    rest: usize,
}

impl ScalarLander {
    /// Returns the weighted reward and whether the episode terminated.
    fn step(&mut self, u: f64, w: &[f64; 4]) -> (f64, bool) {
        let c = &self.cfg;
        let u = u.clamp(-1.0, 1.0);
        let thrust = c.max_thrust * (u + 1.0) / 2.0;
        let mut reward = w[2] * -c.fuel_cost_coeff * thrust;
        let (mut h, mut v) = (self.h + self.v * c.dt, self.v + (thrust - c.gravity) * c.dt);
        let mut done = false;
        if h <= 0.0 {
            let airborne = self.h > 0.0 || self.v < 0.0;
            if airborne && self.v.abs() > c.crash_speed {
                reward += w[1] * c.crash_penalty;
                done = true;
            }
            v = if airborne { 0.0 } else { v.max(0.0) };
            h = 0.0;
        }
        self.h = h;
        self.v = v;
        reward += w[3] * -c.velocity_shaping_coeff * v.abs();
        if !done {
            self.rest = if h == 0.0 && v.abs() < c.velocity_zero_threshold { self.rest + 1 } else { 0 };
            if self.rest == c.landing_hold_steps + 1 {
                reward += w[0] * c.landing_reward;
                done = true;
            }
        }
        (reward, done)
    }
}

struct ScalarWalker {
    cfg: GapWalkerConfig,
    x: f64,
    v: f64,
}

impl ScalarWalker {
    fn step(&mut self, u: f64, w: &[f64; 3]) -> (f64, bool) {
        let c = &self.cfg;
        let u = u.clamp(-1.0, 1.0);
        let x = self.x + self.v * c.dt;
        let mut reward = w[0] * (x - self.x) - w[1] * c.control_cost_coeff * u * u;
        let gap = (c.gap_start..=c.gap_end).contains(&x) && self.v.abs() < c.jump_speed;
        let trip = u * self.v < 0.0 && self.v.abs() >= c.trip_speed && u.abs() >= c.trip_brake;
        let fell = x < c.cliff_position || gap || trip;
        if fell {
            reward += w[2] * c.failure_penalty;
        }
        self.v = (self.v + u * c.accel * c.dt).clamp(-c.max_speed, c.max_speed);
        self.x = x;
        (reward, fell)
    }
}

fn weighted(r: &[f64], w: &[f64]) -> f64 {
    r.iter().zip(w).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lander_composite_matches_scalar_reference(seed in 0u64..10_000, w in prop::array::uniform4(-2.0f64..2.0), bias in -0.5f64..0.5) {
        let cfg = LineLanderConfig::default();
        let mut env = LineLander::new(cfg.clone()).unwrap();
        let obs = env.reset(seed);
        let mut reference = ScalarLander { cfg, h: obs[0], v: obs[1], rest: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ret, mut ref_ret) = (0.0, 0.0);
        loop {
            let u = (bias + rng.random_range(-0.6..0.6)).clamp(-1.0, 1.0);
            let out = env.step(&[u]).unwrap();
            let (r, done) = reference.step(u, &w);
            ret += weighted(&out.reward_components, &w);
            ref_ret += r;
            prop_assert_eq!(out.terminated, done);
            if out.done() {
                break;
            }
        }
        prop_assert!((ret - ref_ret).abs() <= 1e-12 * ret.abs().max(1.0), "{} vs {}", ret, ref_ret);
    }

    #[test]
    fn walker_composite_matches_scalar_reference(seed in 0u64..10_000, w in prop::array::uniform3(-2.0f64..2.0), bias in -0.5f64..1.0) {
        let cfg = GapWalkerConfig::default();
        let mut env = GapWalker::new(cfg.clone()).unwrap();
        env.reset(seed);
        let mut reference = ScalarWalker { cfg, x: env.position(), v: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ret, mut ref_ret) = (0.0, 0.0);
        loop {
            let u = bias + rng.random_range(-1.0..1.0);
            let out = env.step(&[u]).unwrap();
            let (r, fell) = reference.step(u, &w);
            ret += weighted(&out.reward_components, &w);
            ref_ret += r;
            prop_assert_eq!(out.terminated, fell);
            if out.done() {
                break;
            }
        }
        prop_assert!((ret - ref_ret).abs() <= 1e-12 * ret.abs().max(1.0), "{} vs {}", ret, ref_ret);
    }

    #[test]
    fn lander_reward_signs(seed in 0u64..10_000, bias in -1.0f64..1.0) {
        let mut env = LineLander::new(LineLanderConfig::default()).unwrap();
        env.reset(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let out = env.step(&[bias + rng.random_range(-1.0..1.0)]).unwrap();
            let r = &out.reward_components;
            prop_assert!(r[0] >= 0.0 && r[1] <= 0.0 && r[2] <= 0.0 && r[3] <= 0.0, "{:?}", r);
            if out.done() {
                break;
            }
        }
    }
}

/// Descends under proportional control, then cuts thrust on the ground.
fn soft_landing_action(obs: &[f64], descent: f64) -> f64 {
    if obs[0] <= 0.0 {
        return -1.0;
    }
    let target = -(0.3 * obs[0]).clamp(0.2, descent);
    let thrust = 1.0 + 4.0 * (target - obs[1]);
    thrust - 1.0
}

#[test]
fn landing_reward_follows_exactly_hold_steps_of_rest() {
    for trace in [false, true] {
        let cfg = LineLanderConfig {
            include_v0_trace: trace,
            ..Default::default()
        };
        let hold = cfg.landing_hold_steps;
        let mut env = LineLander::new(cfg).unwrap();
        let mut landed = 0;
        for seed in 0..50 {
            let descent = 0.3 + 0.01 * seed as f64;
            let mut obs = vec![env.reset(seed)];
            let mut rewards = Vec::new();
            loop {
                let out = env.step(&[soft_landing_action(obs.last().unwrap(), descent)]).unwrap();
                let done = out.done();
                obs.push(out.obs);
                rewards.push(out.reward_components[0]);
                if done {
                    break;
                }
            }
            if !env.succeeded() {
                continue;
            }
            landed += 1;
            // obs[k] follows step k - 1
            let first_rest = obs
                .iter()
                .position(|o| o[0] == 0.0 && o[1].abs() < 1e-3)
                .expect("a landing passes through rest");
            let paid = rewards.iter().position(|r| *r > 0.0).expect("landing reward") + 1;
            assert_eq!(paid - first_rest, hold, "seed {seed}");
            assert_eq!(paid, obs.len() - 1);
            for o in &obs[first_rest..] {
                assert_eq!(&o[..2], &obs[first_rest][..2]);
            }
            if trace {
                for (k, o) in obs[first_rest..].iter().enumerate() {
                    assert!((o[2] - (k + 1) as f64 / 40.0).abs() < 1e-12);
                }
            }
        }
        assert!(landed >= 40, "only {landed} scripted landings");
    }
}

#[test]
fn episodes_are_reproducible_from_the_reset_seed() {
    let mut env = GapWalker::new(GapWalkerConfig::default()).unwrap();
    let run = |env: &mut GapWalker| {
        let mut obs = vec![env.reset(77)];
        for k in 0..50 {
            let out = env.step(&[((k as f64) * 0.37).sin()]).unwrap();
            let done = out.done();
            obs.push(out.obs);
            if done {
                break;
            }
        }
        obs
    };
    let a = run(&mut env);
    let b = run(&mut env);
    assert_eq!(a, b);
}
