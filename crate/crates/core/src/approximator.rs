//! Dense ReLU multi-layer perceptrons with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat [`ParameterVector`]. Every layer contributes its
//! weights (`fan_in x fan_out`, row-major) followed by its biases, so a layer
//! computes `x W + b`. Hidden layers apply ReLU, the output layer is linear.
//!
//! Batched entry points take row-major `(batch, dim)` buffers and are what the
//! trainer uses; [`mlp_forward`] and [`mlp_backward`] are single-sample
//! conveniences built on top of them.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlpError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input has length {got}, expected {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("upstream gradient has length {got}, expected {expected}")]
    UpstreamShape { expected: usize, got: usize },
    #[error("parameter vector has length {got}, spec requires {expected}")]
    ParamShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient entry {value} at index {index}")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("gradient has length {got}, parameters have length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    input_dim: usize,
    hidden_sizes: Vec<usize>,
    output_dim: usize,
    activation: Activation,
}

/// Location of one layer inside a [`ParameterVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub biases: usize,
}

impl LayerSlot {
    pub fn end(&self) -> usize {
        self.biases + self.fan_out
    }
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_sizes: Vec<usize>,
        output_dim: usize,
    ) -> Result<Self, MlpError> {
        if input_dim == 0 || output_dim == 0 {
            return Err(MlpError::InvalidSpec(
                "input and output dimensions must be at least 1".into(),
            ));
        }
        if hidden_sizes.is_empty() {
            return Err(MlpError::InvalidSpec("at least one hidden layer is required".into()));
        }
        if hidden_sizes.contains(&0) {
            return Err(MlpError::InvalidSpec("hidden layer sizes must be at least 1".into()));
        }
        Ok(Self {
            input_dim,
            hidden_sizes,
            output_dim,
            activation: Activation::Relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_sizes.len() + 1
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::with_capacity(self.num_layers());
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        for &fan_out in self.hidden_sizes.iter().chain(std::iter::once(&self.output_dim)) {
            let weights = offset;
            let biases = weights + fan_in * fan_out;
            slots.push(LayerSlot {
                fan_in,
                fan_out,
                weights,
                biases,
            });
            offset = biases + fan_out;
            fan_in = fan_out;
        }
        slots
    }

    pub fn num_params(&self) -> usize {
        self.layers().last().map_or(0, LayerSlot::end)
    }

    /// Number of leading parameters that belong to hidden layers (everything
    /// except the output layer). These are shared by all output heads.
    pub fn trunk_len(&self) -> usize {
        self.layers().last().map_or(0, |l| l.weights)
    }

    fn check_params(&self, params: &[f64]) -> Result<(), MlpError> {
        let expected = self.num_params();
        if params.len() != expected {
            return Err(MlpError::ParamShape {
                expected,
                got: params.len(),
            });
        }
        Ok(())
    }
}

/// Flat parameter storage for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self(vec![0.0; spec.num_params()])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Uniform fan-in initialisation: weights in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterVector::zeros(spec);
    for layer in spec.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for w in &mut params[layer.weights..layer.biases] {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

/// Activations retained from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    // acts[0] is the input, acts[l + 1] the (post-activation) output of layer l.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network output, row-major `(batch, output_dim)`.
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the input")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("cache always holds the input")
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above keep every index dgemm touches inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub fn forward_batch(
    params: &[f64],
    spec: &MlpSpec,
    inputs: &[f64],
    batch: usize,
) -> Result<ForwardCache, MlpError> {
    spec.check_params(params)?;
    let expected = batch * spec.input_dim;
    if inputs.len() != expected {
        return Err(MlpError::InputShape {
            expected,
            got: inputs.len(),
        });
    }
    let layers = spec.layers();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(inputs.to_vec());
    for (idx, layer) in layers.iter().enumerate() {
        let bias = &params[layer.biases..layer.end()];
        let mut out = Vec::with_capacity(batch * layer.fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        let weights = &params[layer.weights..layer.biases];
        let x = acts.last().expect("input pushed above");
        gemm(
            batch,
            layer.fan_in,
            layer.fan_out,
            x,
            (layer.fan_in, 1),
            weights,
            (layer.fan_out, 1),
            1.0,
            &mut out,
            layer.fan_out,
        );
        if idx + 1 < layers.len() {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        acts.push(out);
    }
    Ok(ForwardCache { batch, acts })
}

/// Backpropagates `upstream = dL/d(output)` through a cached forward pass.
///
/// Parameter gradients are *accumulated* into `grad_params` when given; the
/// input gradient overwrites `grad_input` when given.
pub fn backward_batch(
    params: &[f64],
    spec: &MlpSpec,
    cache: &ForwardCache,
    upstream: &[f64],
    mut grad_params: Option<&mut [f64]>,
    grad_input: Option<&mut [f64]>,
) -> Result<(), MlpError> {
    spec.check_params(params)?;
    let batch = cache.batch;
    let expected = batch * spec.output_dim;
    if upstream.len() != expected {
        return Err(MlpError::UpstreamShape {
            expected,
            got: upstream.len(),
        });
    }
    if let Some(g) = grad_params.as_deref() {
        spec.check_params(g)?;
    }
    if let Some(g) = grad_input.as_deref() {
        if g.len() != batch * spec.input_dim {
            return Err(MlpError::InputShape {
                expected: batch * spec.input_dim,
                got: g.len(),
            });
        }
    }
    let layers = spec.layers();
    let mut delta = upstream.to_vec();
    let mut grad_input = grad_input;
    for (idx, layer) in layers.iter().enumerate().rev() {
        let x = &cache.acts[idx];
        if let Some(g) = grad_params.as_deref_mut() {
            let (gw, gb) = g[layer.weights..layer.end()].split_at_mut(layer.fan_in * layer.fan_out);
            // dW += x^T delta
            gemm(
                layer.fan_in,
                batch,
                layer.fan_out,
                x,
                (1, layer.fan_in),
                &delta,
                (layer.fan_out, 1),
                1.0,
                gw,
                layer.fan_out,
            );
            for row in delta.chunks_exact(layer.fan_out) {
                for (b, d) in gb.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        let need_input_grad = idx > 0 || grad_input.is_some();
        if !need_input_grad {
            break;
        }
        // dX = delta W^T
        let weights = &params[layer.weights..layer.biases];
        let mut dx = vec![0.0; batch * layer.fan_in];
        gemm(
            batch,
            layer.fan_out,
            layer.fan_in,
            &delta,
            (layer.fan_out, 1),
            weights,
            (1, layer.fan_out),
            0.0,
            &mut dx,
            layer.fan_in,
        );
        if idx == 0 {
            if let Some(g) = grad_input.take() {
                g.copy_from_slice(&dx);
            }
        } else {
            for (d, h) in dx.iter_mut().zip(x) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = dx;
        }
    }
    Ok(())
}

pub fn mlp_forward(params: &[f64], spec: &MlpSpec, x: &[f64]) -> Result<Vec<f64>, MlpError> {
    if x.len() != spec.input_dim {
        return Err(MlpError::InputShape {
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    Ok(forward_batch(params, spec, x, 1)?.into_output())
}

/// Gradients of `upstream . mlp_forward(x)` with respect to the parameters and to `x`.
pub fn mlp_backward(
    params: &[f64],
    spec: &MlpSpec,
    x: &[f64],
    upstream: &[f64],
) -> Result<(ParameterVector, Vec<f64>), MlpError> {
    if x.len() != spec.input_dim {
        return Err(MlpError::InputShape {
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    let cache = forward_batch(params, spec, x, 1)?;
    let mut grad_params = ParameterVector::zeros(spec);
    let mut grad_input = vec![0.0; spec.input_dim];
    backward_batch(
        params,
        spec,
        &cache,
        upstream,
        Some(&mut grad_params),
        Some(&mut grad_input),
    )?;
    Ok((grad_params, grad_input))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Rebuilds a state from stored moments, e.g. when loading a checkpoint.
    pub fn from_parts(config: AdamConfig, m: Vec<f64>, v: Vec<f64>, t: u64) -> Self {
        assert_eq!(m.len(), v.len(), "moment vectors must have equal length");
        Self { config, m, v, t }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update. Parameters and state are left untouched on error.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::InvalidLearningRate(lr));
        }
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(OptimError::LengthMismatch {
                expected: self.m.len(),
                got: if grads.len() != self.m.len() { grads.len() } else { params.len() },
            });
        }
        if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index, value });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Row-major dense matrix used for per-sample, per-component batch values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data has the wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(i: usize, h: &[usize], o: usize) -> MlpSpec {
        MlpSpec::new(i, h.to_vec(), o).unwrap()
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut x = at.to_vec();
        (0..at.len())
            .map(|k| {
                let orig = x[k];
                x[k] = orig + h;
                let up = f(&x);
                x[k] = orig - h;
                let down = f(&x);
                x[k] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na.max(nb) == 0.0 {
            0.0
        } else {
            diff / na.max(nb)
        }
    }

    #[test]
    fn spec_rejects_degenerate_shapes() {
        assert!(MlpSpec::new(0, vec![4], 1).is_err());
        assert!(MlpSpec::new(2, vec![], 1).is_err());
        assert!(MlpSpec::new(2, vec![3, 0], 1).is_err());
        assert!(MlpSpec::new(2, vec![3], 0).is_err());
    }

    #[test]
    fn parameter_count_matches_layer_sum() {
        let s = spec(3, &[5, 4], 2);
        assert_eq!(s.num_params(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(s.trunk_len(), 3 * 5 + 5 + 5 * 4 + 4);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let s = spec(4, &[8, 8], 3);
        let a = mlp_init(&s, 7);
        let b = mlp_init(&s, 7);
        let c = mlp_init(&s, 8);
        assert_eq!(a, b);
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
        for layer in s.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            assert!(a[layer.weights..layer.biases].iter().all(|w| w.abs() < bound));
            assert!(a[layer.biases..layer.end()].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let s = spec(3, &[4], 2);
        let params = ParameterVector::zeros(&s);
        assert_eq!(mlp_forward(&params, &s, &[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_two_by_two_network() {
        // hidden: identity embedding with bias, output: identity with bias.
        let s = spec(2, &[2], 2);
        let mut p = ParameterVector::zeros(&s);
        let layers = s.layers();
        // W1 = I, b1 = (0.5, 1.0)
        p[layers[0].weights] = 1.0;
        p[layers[0].weights + 3] = 1.0;
        p[layers[0].biases] = 0.5;
        p[layers[0].biases + 1] = 1.0;
        // W2 = [[2, 0], [1, -1]], b2 = (0, 3)
        p[layers[1].weights..layers[1].biases].copy_from_slice(&[2.0, 0.0, 1.0, -1.0]);
        p[layers[1].biases + 1] = 3.0;
        // x = (1, 2): h = (1.5, 3.0); y = (1.5*2 + 3*1, 1.5*0 + 3*(-1) + 3) = (6, 0)
        assert_eq!(mlp_forward(&p, &s, &[1.0, 2.0]).unwrap(), vec![6.0, 0.0]);
        // x = (-3, 2): h = (max(0,-2.5), 3) = (0, 3); y = (3, 0)
        assert_eq!(mlp_forward(&p, &s, &[-3.0, 2.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn negated_first_layer_keeps_only_negative_preactivations() {
        let s = spec(2, &[2], 2);
        let mut p = ParameterVector::zeros(&s);
        let layers = s.layers();
        let w = [0.7, -0.2, 0.4, 1.1];
        for (k, v) in w.iter().enumerate() {
            p[layers[0].weights + k] = -v;
        }
        // output layer: identity so the output exposes the hidden activations.
        p[layers[1].weights] = 1.0;
        p[layers[1].weights + 3] = 1.0;
        let x = [1.0, -0.5];
        // Wx per hidden unit j: sum_i x_i w[i][j]
        let wx = [x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]];
        let expected: Vec<f64> = wx.iter().map(|v: &f64| (-v).max(0.0)).collect();
        assert_eq!(mlp_forward(&p, &s, &x).unwrap(), expected);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let s = spec(3, &[4], 2);
        let p = mlp_init(&s, 0);
        assert_eq!(
            mlp_forward(&p, &s, &[1.0]),
            Err(MlpError::InputShape { expected: 3, got: 1 })
        );
        assert!(mlp_backward(&p, &s, &[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn scalar_chain_rule_for_linear_unit() {
        // A single hidden ReLU unit fed a positive input acts linearly: y = v * relu(w x + b) + c.
        let s = spec(1, &[1], 1);
        let mut p = ParameterVector::zeros(&s);
        p.copy_from_slice(&[0.8, 0.1, 1.5, -0.3]);
        let x = 2.0;
        let (g, gx) = mlp_backward(&p, &s, &[x], &[1.0]).unwrap();
        let h = 0.8 * x + 0.1;
        assert_eq!(&g[..], &[1.5 * x, 1.5, h, 1.0]);
        assert_eq!(gx, vec![1.5 * 0.8]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = spec(3, &[5, 4], 2);
        let p = mlp_init(&s, 3);
        let (g, gx) = mlp_backward(&p, &s, &[0.3, -0.1, 0.9], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for case in 0..100 {
            let input_dim = rng.random_range(1..=8);
            let hidden: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=8)).collect();
            let output_dim = rng.random_range(1..=8);
            let s = spec(input_dim, &hidden, output_dim);
            let mut p = mlp_init(&s, case);
            for v in p.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
            let x: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (g, gx) = mlp_backward(&p, &s, &x, &u).unwrap();
            let loss = |params: &[f64], input: &[f64]| -> f64 {
                mlp_forward(params, &s, input)
                    .unwrap()
                    .iter()
                    .zip(&u)
                    .map(|(y, w)| y * w)
                    .sum()
            };
            let fd_p = central_difference(|q| loss(q, &x), &p, 1e-5);
            let fd_x = central_difference(|xx| loss(&p, xx), &x, 1e-5);
            worst = worst.max(rel_err(&g, &fd_p)).max(rel_err(&gx, &fd_x));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let s = spec(4, &[6, 5], 3);
        let p = mlp_init(&s, 9);
        let x = [0.2, -0.4, 0.9, 0.1];
        let u1 = [0.5, -1.0, 2.0];
        let u2 = [-0.3, 0.7, 0.1];
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let (g1, x1) = mlp_backward(&p, &s, &x, &u1).unwrap();
        let (g2, x2) = mlp_backward(&p, &s, &x, &u2).unwrap();
        let (g, xg) = mlp_backward(&p, &s, &x, &sum).unwrap();
        for k in 0..g.len() {
            assert!((g[k] - g1[k] - g2[k]).abs() < 1e-10);
        }
        for k in 0..xg.len() {
            assert!((xg[k] - x1[k] - x2[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn batched_pass_matches_per_sample_pass() {
        let s = spec(3, &[7, 4], 2);
        let p = mlp_init(&s, 5);
        let xs = [0.1, 0.2, 0.3, -1.0, 0.5, 0.25, 0.9, -0.9, 0.0];
        let us = [1.0, 0.0, -0.5, 2.0, 0.3, 0.3];
        let cache = forward_batch(&p, &s, &xs, 3).unwrap();
        let mut g = ParameterVector::zeros(&s);
        let mut gx = vec![0.0; 9];
        backward_batch(&p, &s, &cache, &us, Some(&mut g), Some(&mut gx)).unwrap();
        let mut g_ref = vec![0.0; s.num_params()];
        for r in 0..3 {
            let y = mlp_forward(&p, &s, &xs[r * 3..r * 3 + 3]).unwrap();
            assert_eq!(&cache.output()[r * 2..r * 2 + 2], &y[..]);
            let (gr, gxr) = mlp_backward(&p, &s, &xs[r * 3..r * 3 + 3], &us[r * 2..r * 2 + 2]).unwrap();
            for (acc, v) in g_ref.iter_mut().zip(gr.iter()) {
                *acc += v;
            }
            for k in 0..3 {
                assert!((gx[r * 3 + k] - gxr[k]).abs() < 1e-12);
            }
        }
        for (a, b) in g.iter().zip(&g_ref) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut p = [0.5];
        state.step(&mut p, &[1.0], 3e-4).unwrap();
        let expected = 0.5 - 3e-4 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut p = [1.0, -2.0, 3.0];
        state.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_constant_gradient_second_update_is_learning_rate() {
        // With g = 1 both bias-corrected moments equal 1 at every step.
        let lr = 3e-4;
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut p = [0.0];
        state.step(&mut p, &[1.0], lr).unwrap();
        let after_first = p[0];
        state.step(&mut p, &[1.0], lr).unwrap();
        let second = after_first - p[0];
        assert!((second - lr / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(state.steps(), 2);
    }

    #[test]
    fn adam_reports_non_finite_gradient_index() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut p = [1.0, 2.0, 3.0];
        let err = state.step(&mut p, &[0.0, f64::NAN, 1.0], 1e-3).unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient { index: 1, .. }));
        assert_eq!(p, [1.0, 2.0, 3.0]);
        assert_eq!(state.steps(), 0);
        assert!(state.step(&mut p, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn adam_second_moment_stays_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = AdamState::new(16, AdamConfig::default());
        let mut p = vec![0.0; 16];
        for _ in 0..50 {
            let g: Vec<f64> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
            state.step(&mut p, &g, 1e-2).unwrap();
        }
        assert!(state.second_moment().iter().all(|&v| v >= 0.0));
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
