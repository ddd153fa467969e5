//! Tanh-squashed diagonal Gaussian policy.
//!
//! The network outputs `2 * action_dim` values per state: the Gaussian means
//! followed by the raw log standard deviations. Actions are
//! `tanh(mu + sigma * eps)` with caller-supplied unit-normal noise `eps`.

use crate::approximator::{
    backward_batch, forward_batch, mlp_init, ForwardCache, MlpError, MlpSpec, ParameterVector,
};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 - tanh(z)^2)` without cancellation for large `|z|`.
pub fn log_one_minus_tanh_sq(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z - softplus(-2.0 * z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    spec: MlpSpec,
    params: ParameterVector,
    action_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Everything a batched sample keeps around for the backward pass.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    batch: usize,
    action_dim: usize,
    cache: ForwardCache,
    noise: Vec<f64>,
    pre_tanh: Vec<f64>,
    log_std: Vec<f64>,
    clamped: Vec<bool>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyBatch {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn action(&self, row: usize) -> &[f64] {
        &self.actions[row * self.action_dim..(row + 1) * self.action_dim]
    }
}

impl PolicyNetwork {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden_sizes: Vec<usize>,
        seed: u64,
    ) -> Result<Self, MlpError> {
        let spec = MlpSpec::new(obs_dim, hidden_sizes, 2 * action_dim)?;
        let params = mlp_init(&spec, seed);
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: MlpSpec, params: ParameterVector) -> Result<Self, MlpError> {
        if spec.output_dim() % 2 != 0 {
            return Err(MlpError::InvalidSpec(
                "policy output must hold a mean and a log-std per action dimension".into(),
            ));
        }
        if params.len() != spec.num_params() {
            return Err(MlpError::ParamShape {
                expected: spec.num_params(),
                got: params.len(),
            });
        }
        let action_dim = spec.output_dim() / 2;
        Ok(Self {
            spec,
            params,
            action_dim,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    /// Reparameterised sample for a single state.
    pub fn sample_action(&self, state: &[f64], noise: &[f64]) -> Result<SampledAction, MlpError> {
        let batch = self.sample_batch(state, noise, 1)?;
        Ok(SampledAction {
            action: batch.actions,
            log_prob: batch.log_probs[0],
        })
    }

    /// Evaluation action `tanh(mu(s))`.
    pub fn deterministic_action(&self, state: &[f64]) -> Result<Vec<f64>, MlpError> {
        let zeros = vec![0.0; self.action_dim];
        Ok(self.sample_action(state, &zeros)?.action)
    }

    pub fn deterministic_batch(&self, states: &[f64], batch: usize) -> Result<Vec<f64>, MlpError> {
        let zeros = vec![0.0; batch * self.action_dim];
        Ok(self.sample_batch(states, &zeros, batch)?.actions)
    }

    pub fn sample_batch(
        &self,
        states: &[f64],
        noise: &[f64],
        batch: usize,
    ) -> Result<PolicyBatch, MlpError> {
        let d = self.action_dim;
        if noise.len() != batch * d {
            return Err(MlpError::InputShape {
                expected: batch * d,
                got: noise.len(),
            });
        }
        let cache = forward_batch(&self.params, &self.spec, states, batch)?;
        let out = cache.output();
        let mut pre_tanh = vec![0.0; batch * d];
        let mut log_std = vec![0.0; batch * d];
        let mut clamped = vec![false; batch * d];
        let mut actions = vec![0.0; batch * d];
        let mut log_probs = vec![0.0; batch];
        for r in 0..batch {
            let row = &out[r * 2 * d..(r + 1) * 2 * d];
            let mut logp = 0.0;
            for k in 0..d {
                let idx = r * d + k;
                let raw = row[d + k];
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                clamped[idx] = raw != ls;
                log_std[idx] = ls;
                let eps = noise[idx];
                let z = row[k] + ls.exp() * eps;
                pre_tanh[idx] = z;
                actions[idx] = z.tanh();
                logp += -0.5 * eps * eps - ls - HALF_LOG_TWO_PI - log_one_minus_tanh_sq(z);
            }
            log_probs[r] = logp;
        }
        Ok(PolicyBatch {
            batch,
            action_dim: d,
            cache,
            noise: noise.to_vec(),
            pre_tanh,
            log_std,
            clamped,
            actions,
            log_probs,
        })
    }

    /// Parameter gradient of a loss given its partials with respect to the
    /// sampled actions (`batch x action_dim`) and log-probabilities (`batch`).
    pub fn backward(
        &self,
        sample: &PolicyBatch,
        dloss_daction: &[f64],
        dloss_dlogp: &[f64],
    ) -> Result<ParameterVector, MlpError> {
        let d = self.action_dim;
        let batch = sample.batch;
        if dloss_daction.len() != batch * d {
            return Err(MlpError::UpstreamShape {
                expected: batch * d,
                got: dloss_daction.len(),
            });
        }
        if dloss_dlogp.len() != batch {
            return Err(MlpError::UpstreamShape {
                expected: batch,
                got: dloss_dlogp.len(),
            });
        }
        let mut upstream = vec![0.0; batch * 2 * d];
        for r in 0..batch {
            let gl = dloss_dlogp[r];
            for k in 0..d {
                let idx = r * d + k;
                let a = sample.actions[idx];
                let z = sample.pre_tanh[idx];
                // d logp / dz = 2 tanh(z) from the squash correction.
                let dz = dloss_daction[idx] * (1.0 - a * a) + gl * 2.0 * z.tanh();
                upstream[r * 2 * d + k] = dz;
                upstream[r * 2 * d + d + k] = if sample.clamped[idx] {
                    0.0
                } else {
                    dz * sample.log_std[idx].exp() * sample.noise[idx] - gl
                };
            }
        }
        let mut grads = ParameterVector::zeros(&self.spec);
        backward_batch(
            &self.params,
            &self.spec,
            &sample.cache,
            &upstream,
            Some(&mut grads),
            None,
        )?;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Single-hidden-unit policy whose heads are `mu = mu0`, `log_std = ls0` for every state.
    fn constant_policy(action_dim: usize, mu: &[f64], log_std: &[f64]) -> PolicyNetwork {
        let spec = MlpSpec::new(1, vec![1], 2 * action_dim).unwrap();
        let mut params = ParameterVector::zeros(&spec);
        let out = spec.layers()[1];
        for k in 0..action_dim {
            params[out.biases + k] = mu[k];
            params[out.biases + action_dim + k] = log_std[k];
        }
        PolicyNetwork::from_params(spec, params).unwrap()
    }

    #[test]
    fn stable_squash_correction_matches_naive_form() {
        for z in [-3.0, -0.5, 0.0, 0.1, 1.7, 4.0] {
            let naive = (1.0 - f64::tanh(z).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(z) - naive).abs() < 1e-12);
        }
        // the naive form underflows to -inf here; the stable one stays finite.
        assert!(log_one_minus_tanh_sq(30.0).is_finite());
        assert!((log_one_minus_tanh_sq(30.0) - (2.0 * std::f64::consts::LN_2 - 60.0)).abs() < 1e-9);
    }

    #[test]
    fn density_at_the_mode() {
        let p = constant_policy(1, &[0.0], &[0.0]);
        let s = p.sample_action(&[0.3], &[0.0]).unwrap();
        assert_eq!(s.action, vec![0.0]);
        assert!((s.log_prob - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((s.log_prob + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_gives_tanh_of_mean() {
        let p = constant_policy(2, &[0.4, -1.3], &[-0.5, 0.7]);
        let s = p.sample_action(&[1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.action, vec![0.4f64.tanh(), (-1.3f64).tanh()]);
        assert_eq!(p.deterministic_action(&[1.0]).unwrap(), s.action);
    }

    #[test]
    fn deterministic_action_saturates() {
        let p = constant_policy(1, &[12.0], &[0.0]);
        let a = p.deterministic_action(&[0.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-8);
        let zero = constant_policy(1, &[0.0], &[0.0]);
        assert_eq!(zero.deterministic_action(&[5.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn actions_stay_inside_open_box_and_logp_finite() {
        let p = PolicyNetwork::new(3, 2, vec![8], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let eps: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
            let out = p.sample_action(&s, &eps).unwrap();
            assert!(out.action.iter().all(|a| a.abs() <= 1.0));
            assert!(out.log_prob.is_finite());
        }
    }

    #[test]
    fn log_std_is_clamped() {
        let p = constant_policy(1, &[0.0], &[5.0]);
        let batch = p.sample_batch(&[0.0], &[1.0], 1).unwrap();
        assert_eq!(batch.log_std[0], LOG_STD_MAX);
        let p = constant_policy(1, &[0.0], &[-30.0]);
        let batch = p.sample_batch(&[0.0], &[1.0], 1).unwrap();
        assert_eq!(batch.log_std[0], LOG_STD_MIN);
        assert!(batch.clamped[0]);
    }

    #[test]
    fn logp_decreases_with_noise_magnitude_for_narrow_centred_policies() {
        // d logp / d eps = -eps + 2 sigma tanh(sigma eps), negative for eps > 0 while sigma^2 < 1/2.
        for ls in [-2.0, -1.0, -0.4] {
            let p = constant_policy(1, &[0.0], &[ls]);
            let mut prev = f64::INFINITY;
            for k in 0..60 {
                let eps = k as f64 * 0.1;
                let pos = p.sample_action(&[0.0], &[eps]).unwrap().log_prob;
                let neg = p.sample_action(&[0.0], &[-eps]).unwrap().log_prob;
                assert!(pos < prev || k == 0);
                assert!((pos - neg).abs() < 1e-12);
                prev = pos;
            }
        }
    }

    #[test]
    fn logp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..20 {
            let p = PolicyNetwork::new(3, 2, vec![6, 5], case).unwrap();
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let ga: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gl = rng.random_range(-1.0..1.0);
            let sample = p.sample_batch(&s, &eps, 1).unwrap();
            let analytic = p.backward(&sample, &ga, &[gl]).unwrap();
            let objective = |params: &[f64]| {
                let q = PolicyNetwork::from_params(
                    p.spec().clone(),
                    ParameterVector::from_vec(params.to_vec()),
                )
                .unwrap();
                let out = q.sample_action(&s, &eps).unwrap();
                gl * out.log_prob + out.action.iter().zip(&ga).map(|(a, g)| a * g).sum::<f64>()
            };
            let mut x = p.params().to_vec();
            let mut num = vec![0.0; x.len()];
            for k in 0..x.len() {
                let orig = x[k];
                x[k] = orig + 1e-5;
                let up = objective(&x);
                x[k] = orig - 1e-5;
                let down = objective(&x);
                x[k] = orig;
                num[k] = (up - down) / 2e-5;
            }
            let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale < 1e-4, "case {case}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn saturated_log_std_head_gets_no_gradient() {
        let p = constant_policy(1, &[0.2], &[4.0]);
        let sample = p.sample_batch(&[1.0], &[0.8], 1).unwrap();
        let g = p.backward(&sample, &[1.0], &[1.0]).unwrap();
        let out = p.spec().layers()[1];
        // log-std output column: bias and the incoming weight are both frozen.
        assert_eq!(g[out.biases + 1], 0.0);
        assert_eq!(g[out.weights + 1], 0.0);
        assert_ne!(g[out.biases], 0.0);
    }

    #[test]
    fn monte_carlo_mean_matches_squashed_density() {
        let mu = 0.3;
        let ls: f64 = -0.2;
        let sigma = ls.exp();
        let p = constant_policy(1, &[mu], &[ls]);
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = rand_distr::Normal::new(mu, sigma).unwrap();
        let std_normal = rand_distr::StandardNormal;
        let (mut sum_raw, mut sum_sq) = (0.0, 0.0);
        let mut sum_policy = 0.0;
        for _ in 0..n {
            let z: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
            let a = z.tanh();
            sum_raw += a;
            sum_sq += a * a;
            let eps: f64 = rand_distr::Distribution::sample(&std_normal, &mut rng);
            sum_policy += p.sample_action(&[0.0], &[eps]).unwrap().action[0];
        }
        let mean_raw = sum_raw / n as f64;
        let var = sum_sq / n as f64 - mean_raw * mean_raw;
        let se = (2.0 * var / n as f64).sqrt();
        let mean_policy = sum_policy / n as f64;
        assert!((mean_policy - mean_raw).abs() < 3.0 * se);

        // Expectation of the action under exp(logp): integrate over z with the Jacobian da/dz.
        let (lo, hi, steps) = (mu - 12.0 * sigma, mu + 12.0 * sigma, 200_000);
        let h = (hi - lo) / steps as f64;
        let mut quad = 0.0;
        for k in 0..=steps {
            let z: f64 = lo + k as f64 * h;
            let eps = (z - mu) / sigma;
            let s = p.sample_action(&[0.0], &[eps]).unwrap();
            let density_a = s.log_prob.exp();
            let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
            quad += weight * s.action[0] * density_a * (1.0 - s.action[0].powi(2)) * h;
        }
        assert!((quad - mean_raw).abs() < 3.0 * se, "quadrature {quad} vs {mean_raw}");
    }
}
