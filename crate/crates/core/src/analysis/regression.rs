//! Supervised value models fitted to Monte-Carlo returns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    backward_batch, forward_batch, mlp_init, AdamConfig, AdamState, MlpSpec, ParameterVector,
};

use super::AnalysisError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64],
            learning_rate: 1e-3,
            batch_size: 256,
            steps: 5000,
            seed: 0,
        }
    }
}

/// MLP regressor with per-feature input standardisation and per-output target scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnModel {
    spec: MlpSpec,
    params: ParameterVector,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    target_mean: Vec<f64>,
    target_scale: Vec<f64>,
}

fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let scale = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

fn standardise(row: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    row.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s).collect()
}

impl ReturnModel {
    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, AnalysisError> {
        let x = standardise(input, &self.input_mean, &self.input_scale);
        let out = forward_batch(&self.params, &self.spec, &x, 1)?.into_output();
        Ok(out
            .iter()
            .zip(&self.target_mean)
            .zip(&self.target_scale)
            .map(|((o, m), s)| o * s + m)
            .collect())
    }
}

/// Mean-squared-error fit of `targets` from `inputs` with Adam on random minibatches.
pub fn fit_return_model(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    config: &RegressionConfig,
) -> Result<ReturnModel, AnalysisError> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(AnalysisError::LengthMismatch {
            predictions: inputs.len(),
            returns: targets.len(),
        });
    }
    let in_dim = inputs[0].len();
    let out_dim = targets[0].len();
    let spec = MlpSpec::new(in_dim, config.hidden_sizes.clone(), out_dim)?;
    let mut params = mlp_init(&spec, config.seed);
    let (input_mean, input_scale) = column_stats(inputs);
    let (target_mean, target_scale) = column_stats(targets);
    let xs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|r| standardise(r, &input_mean, &input_scale))
        .collect();
    let ys: Vec<Vec<f64>> = targets
        .iter()
        .map(|r| standardise(r, &target_mean, &target_scale))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = AdamState::new(params.len(), AdamConfig::default());
    let b = config.batch_size.min(xs.len()).max(1);
    let mut x_batch = vec![0.0; b * in_dim];
    let mut idx = vec![0usize; b];
    for _ in 0..config.steps {
        for (k, slot) in idx.iter_mut().enumerate() {
            *slot = rng.random_range(0..xs.len());
            x_batch[k * in_dim..(k + 1) * in_dim].copy_from_slice(&xs[*slot]);
        }
        let cache = forward_batch(&params, &spec, &x_batch, b)?;
        let out = cache.output();
        let mut upstream = vec![0.0; b * out_dim];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..out_dim {
                upstream[k * out_dim + j] = (out[k * out_dim + j] - ys[i][j]) / b as f64;
            }
        }
        let mut grad = ParameterVector::zeros(&spec);
        backward_batch(&params, &spec, &cache, &upstream, Some(&mut grad), None)?;
        adam.step(&mut params, &grad, config.learning_rate)?;
    }
    Ok(ReturnModel {
        spec,
        params,
        input_mean,
        input_scale,
        target_mean,
        target_scale,
    })
}
