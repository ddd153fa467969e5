//! CAGrad combination of per-head critic gradients.
//!
//! The inner problem minimises
//! `F(w) = g_w . g0 + c |g0| |g_w|` with `g_w = (1/n) sum_i w_i g_i` and
//! `g0 = (1/n) sum_i g_i` over the probability simplex. Everything the solver
//! needs is contained in the Gram matrix of the head gradients, so the solve
//! costs `O(n^2)` per iteration regardless of the parameter count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradSurgeryError {
    #[error("need at least {min} head gradients, got {got}")]
    TooFewHeads { min: usize, got: usize },
    #[error("head {head} gradient has length {got}, expected {expected}")]
    LengthMismatch {
        head: usize,
        expected: usize,
        got: usize,
    },
    #[error("head {head} gradient entry {index} is not finite")]
    NonFinite { head: usize, index: usize },
    #[error("weights have {got} entries for {expected} heads")]
    WeightCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    grads: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl HeadGradients {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self, GradSurgeryError> {
        if grads.is_empty() {
            return Err(GradSurgeryError::TooFewHeads { min: 1, got: 0 });
        }
        let len = grads[0].len();
        for (head, g) in grads.iter().enumerate() {
            if g.len() != len {
                return Err(GradSurgeryError::LengthMismatch {
                    head,
                    expected: len,
                    got: g.len(),
                });
            }
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(GradSurgeryError::NonFinite { head, index });
            }
        }
        let uniform = vec![1.0 / grads.len() as f64; grads.len()];
        let mean = weighted_sum(&grads, &uniform);
        Ok(Self { grads, mean })
    }

    pub fn num_heads(&self) -> usize {
        self.grads.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn head(&self, i: usize) -> &[f64] {
        &self.grads[i]
    }

    /// `g0`, the plain average of the head gradients.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn gram(&self, scale: f64) -> Vec<f64> {
        let n = self.grads.len();
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let d = dot(&self.grads[i], &self.grads[j]) / (scale * scale);
                g[i * n + j] = d;
                g[j * n + i] = d;
            }
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn weighted_sum(grads: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grads[0].len()];
    for (g, &wi) in grads.iter().zip(w) {
        for (o, x) in out.iter_mut().zip(g) {
            *o += wi * x;
        }
    }
    out
}

/// Exact `F(w)` on the raw (unnormalised) head gradients.
pub fn cagrad_objective(
    w: &[f64],
    grads: &HeadGradients,
    c: f64,
) -> Result<f64, GradSurgeryError> {
    let n = grads.num_heads();
    if w.len() != n {
        return Err(GradSurgeryError::WeightCount {
            expected: n,
            got: w.len(),
        });
    }
    let scaled: Vec<f64> = w.iter().map(|wi| wi / n as f64).collect();
    let gw = weighted_sum(&grads.grads, &scaled);
    let g0 = grads.mean();
    Ok(dot(&gw, g0) + c * norm(g0) * norm(&gw))
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    /// Stop once a projected step moves the weights by less than this (max-norm).
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            initial_step: 0.1,
            tolerance: 1e-12,
        }
    }
}

/// `F` and its gradient on the Gram matrix; constant factor `1/n^2` dropped.
struct GramObjective {
    gram: Vec<f64>,
    g_one: Vec<f64>,
    g0_norm: f64,
    c: f64,
    n: usize,
}

impl GramObjective {
    fn quad(&self, w: &[f64]) -> (Vec<f64>, f64) {
        let n = self.n;
        let gw: Vec<f64> = (0..n)
            .map(|i| dot(&self.gram[i * n..(i + 1) * n], w))
            .collect();
        let q = dot(w, &gw).max(0.0);
        (gw, q)
    }

    fn value(&self, w: &[f64]) -> f64 {
        let (_, q) = self.quad(w);
        dot(w, &self.g_one) + self.c * self.g0_norm * q.sqrt()
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let (gw, q) = self.quad(w);
        let r = q.sqrt();
        let coef = if r > 0.0 { self.c * self.g0_norm / r } else { 0.0 };
        self.g_one.iter().zip(&gw).map(|(a, b)| a + coef * b).collect()
    }
}

/// Simplex weights minimising `F`, found by projected gradient descent with a
/// backtracking step size, started from the uniform weights.
pub fn cagrad_weights(
    grads: &HeadGradients,
    c: f64,
    config: &SolverConfig,
) -> Result<Vec<f64>, GradSurgeryError> {
    let n = grads.num_heads();
    if n < 2 {
        return Err(GradSurgeryError::TooFewHeads { min: 2, got: n });
    }
    let mut w = vec![1.0 / n as f64; n];
    let mean_norm = grads.grads.iter().map(|g| norm(g)).sum::<f64>() / n as f64;
    if mean_norm == 0.0 {
        return Ok(w);
    }
    let gram = grads.gram(mean_norm);
    let g_one: Vec<f64> = (0..n).map(|i| gram[i * n..(i + 1) * n].iter().sum()).collect();
    let g0_norm = g_one.iter().sum::<f64>().max(0.0).sqrt();
    let obj = GramObjective {
        gram,
        g_one,
        g0_norm,
        c,
        n,
    };

    let mut step = config.initial_step;
    let mut f = obj.value(&w);
    for _ in 0..config.max_iters {
        let grad = obj.gradient(&w);
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let cand = project_to_simplex(&trial);
            let delta: Vec<f64> = cand.iter().zip(&w).map(|(a, b)| a - b).collect();
            let moved = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if moved <= config.tolerance {
                break;
            }
            let f_cand = obj.value(&cand);
            let model = f + dot(&grad, &delta) + dot(&delta, &delta) / (2.0 * step);
            if f_cand <= model {
                accepted = Some((cand, f_cand));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, f_cand)) => {
                w = cand;
                f = f_cand;
                step = (step * 2.0).min(1e6);
            }
            None => break,
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionRule {
    /// `sum_i w_i g_i`.
    #[default]
    Weighted,
    /// `g0 + (c |g0| / |g_w|) g_w`.
    Original,
}

pub fn cagrad_direction(
    grads: &HeadGradients,
    w: &[f64],
    c: f64,
    rule: DirectionRule,
) -> Result<Vec<f64>, GradSurgeryError> {
    let n = grads.num_heads();
    if w.len() != n {
        return Err(GradSurgeryError::WeightCount {
            expected: n,
            got: w.len(),
        });
    }
    match rule {
        DirectionRule::Weighted => Ok(weighted_sum(&grads.grads, w)),
        DirectionRule::Original => {
            let scaled: Vec<f64> = w.iter().map(|wi| wi / n as f64).collect();
            let gw = weighted_sum(&grads.grads, &scaled);
            let gw_norm = norm(&gw);
            let mut out = grads.mean.clone();
            if gw_norm > 0.0 {
                let coef = c * norm(&grads.mean) / gw_norm;
                for (o, g) in out.iter_mut().zip(&gw) {
                    *o += coef * g;
                }
            }
            Ok(out)
        }
    }
}
