//! Reward-component influence on the greedy action.
//!
//! Influence of component `i` at state `s` is the size of the change in the
//! composite value's action gradient when the component is removed, measured
//! at the policy's deterministic action.

use std::io::Write;

use crate::approximator::{Matrix, MlpError};
use crate::policy::PolicyNetwork;
use crate::sacd::{composite, DecomposedCritic};

use super::AnalysisError;

/// Anything exposing per-head values and weighted action gradients.
pub trait ComponentValueModel {
    fn num_heads(&self) -> usize;
    fn head_values(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>, AnalysisError>;
    /// `d/da sum_i head_weights_i Q_i(s, a)`.
    fn action_gradient(
        &self,
        state: &[f64],
        action: &[f64],
        head_weights: &[f64],
    ) -> Result<Vec<f64>, AnalysisError>;
}

/// One online twin of a decomposed critic.
#[derive(Debug, Clone, Copy)]
pub struct CriticTwin<'a> {
    pub critic: &'a DecomposedCritic,
    pub twin: usize,
}

impl ComponentValueModel for CriticTwin<'_> {
    fn num_heads(&self) -> usize {
        self.critic.heads()
    }

    fn head_values(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>, AnalysisError> {
        let obs = Matrix::from_vec(1, state.len(), state.to_vec());
        let act = Matrix::from_vec(1, action.len(), action.to_vec());
        Ok(self.critic.online_q(self.twin, &obs, &act)?.into_vec())
    }

    fn action_gradient(
        &self,
        state: &[f64],
        action: &[f64],
        head_weights: &[f64],
    ) -> Result<Vec<f64>, AnalysisError> {
        Ok(self.critic.action_gradient(self.twin, state, action, head_weights)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSample {
    pub state_id: usize,
    /// Definitional influence `lambda |grad Q - grad Q_without_i|`.
    pub influence: Vec<f64>,
    /// Same quantity through `lambda |w_i| |grad Q_i|`.
    pub linear_influence: Vec<f64>,
    pub fractional: Vec<f64>,
    pub degenerate: bool,
    pub lambda: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalised influence; all zeros and `true` when nothing has influence.
pub fn fractional_influence(influence: &[f64]) -> (Vec<f64>, bool) {
    let total: f64 = influence.iter().sum();
    if total > 0.0 {
        (influence.iter().map(|x| x / total).collect(), false)
    } else {
        (vec![0.0; influence.len()], true)
    }
}

/// Influence of every head of `model` at `(state, action)`.
pub fn influence(
    model: &dyn ComponentValueModel,
    state: &[f64],
    action: &[f64],
    head_weights: &[f64],
    lambda: f64,
) -> Result<InfluenceSample, AnalysisError> {
    let n = model.num_heads();
    if head_weights.len() != n {
        return Err(AnalysisError::WeightCount {
            expected: n,
            got: head_weights.len(),
        });
    }
    let full = model.action_gradient(state, action, head_weights)?;
    let mut definitional = Vec::with_capacity(n);
    let mut linear = Vec::with_capacity(n);
    for i in 0..n {
        let mut ablated = head_weights.to_vec();
        ablated[i] = 0.0;
        let without = model.action_gradient(state, action, &ablated)?;
        let diff: Vec<f64> = full.iter().zip(&without).map(|(a, b)| a - b).collect();
        definitional.push(lambda * norm(&diff));

        let mut unit = vec![0.0; n];
        unit[i] = 1.0;
        let gi = model.action_gradient(state, action, &unit)?;
        linear.push(lambda * head_weights[i].abs() * norm(&gi));
    }
    let scale = definitional.iter().chain(&linear).fold(1.0f64, |m, v| m.max(v.abs()));
    for (i, (a, b)) in definitional.iter().zip(&linear).enumerate() {
        if (a - b).abs() > 1e-8 * scale {
            return Err(AnalysisError::InfluenceIdentity {
                head: i,
                definitional: *a,
                linear: *b,
            });
        }
    }
    let (fractional, degenerate) = fractional_influence(&definitional);
    Ok(InfluenceSample {
        state_id: 0,
        influence: definitional,
        linear_influence: linear,
        fractional,
        degenerate,
        lambda,
    })
}

/// Twin with the smaller composite at `(state, action)`; ties go to twin 0.
pub fn min_composite_twin(
    critic: &DecomposedCritic,
    state: &[f64],
    action: &[f64],
    head_weights: &[f64],
) -> Result<usize, MlpError> {
    let obs = Matrix::from_vec(1, state.len(), state.to_vec());
    let act = Matrix::from_vec(1, action.len(), action.to_vec());
    let c1 = composite(&critic.online_q(0, &obs, &act)?, head_weights)[0];
    let c2 = composite(&critic.online_q(1, &obs, &act)?, head_weights)[0];
    Ok(usize::from(c2 < c1))
}

/// Influence at the policy's deterministic action, read from the min-composite twin.
pub fn agent_influence(
    critic: &DecomposedCritic,
    policy: &PolicyNetwork,
    state: &[f64],
    head_weights: &[f64],
    lambda: f64,
) -> Result<InfluenceSample, AnalysisError> {
    let action = policy.deterministic_action(state)?;
    let twin = min_composite_twin(critic, state, &action, head_weights)?;
    influence(&CriticTwin { critic, twin }, state, &action, head_weights, lambda)
}

/// Per-state influence along a recorded sequence of states.
pub fn trajectory_influence(
    critic: &DecomposedCritic,
    policy: &PolicyNetwork,
    states: &[Vec<f64>],
    head_weights: &[f64],
) -> Result<Vec<InfluenceSample>, AnalysisError> {
    states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut sample = agent_influence(critic, policy, s, head_weights, 1.0)?;
            sample.state_id = t;
            Ok(sample)
        })
        .collect()
}

/// Mean fractional influence over a probe set; degenerate probes count as zeros.
pub fn mean_fractional(samples: &[InfluenceSample]) -> (Vec<f64>, usize) {
    let n = samples.first().map_or(0, |s| s.fractional.len());
    let mut mean = vec![0.0; n];
    let mut degenerate = 0;
    for s in samples {
        degenerate += usize::from(s.degenerate);
        for (m, v) in mean.iter_mut().zip(&s.fractional) {
            *m += v / samples.len() as f64;
        }
    }
    (mean, degenerate)
}

pub fn write_trajectory_csv<W: Write>(
    out: W,
    head_names: &[String],
    samples: &[InfluenceSample],
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(head_names.iter().cloned());
    header.push("degenerate".into());
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.state_id.to_string()];
        row.extend(s.fractional.iter().map(|v| v.to_string()));
        row.push(s.degenerate.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSnapshot {
    pub step: u64,
    pub mean_fractional: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSummary {
    /// Head indices in output order (largest final-step influence first).
    pub order: Vec<usize>,
    pub names: Vec<String>,
    pub steps: Vec<u64>,
    /// `rows[k][c]`: mean influence at `steps[k]` of head `order[c]`.
    pub rows: Vec<Vec<f64>>,
}

/// Pools snapshots across runs step by step and orders components by their
/// final-step mean, largest first.
pub fn influence_training_summary(
    runs: &[Vec<InfluenceSnapshot>],
    head_names: &[String],
) -> Result<InfluenceSummary, AnalysisError> {
    let first = runs
        .iter()
        .find(|r| !r.is_empty())
        .ok_or(AnalysisError::EmptyLog)?;
    let n = head_names.len();
    let steps: Vec<u64> = first.iter().map(|s| s.step).collect();
    let mut means = Vec::with_capacity(steps.len());
    for (k, &step) in steps.iter().enumerate() {
        let mut acc = vec![0.0; n];
        let mut count = 0usize;
        for run in runs {
            if let Some(snap) = run.get(k) {
                if snap.step != step {
                    return Err(AnalysisError::MisalignedRuns { step });
                }
                if snap.mean_fractional.len() != n {
                    return Err(AnalysisError::WeightCount {
                        expected: n,
                        got: snap.mean_fractional.len(),
                    });
                }
                for (a, v) in acc.iter_mut().zip(&snap.mean_fractional) {
                    *a += v;
                }
                count += 1;
            }
        }
        means.push(acc.into_iter().map(|a| a / count as f64).collect::<Vec<f64>>());
    }
    let last = means.last().cloned().unwrap_or_default();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| last[b].total_cmp(&last[a]).then(a.cmp(&b)));
    let rows = means
        .iter()
        .map(|row| order.iter().map(|&i| row[i]).collect())
        .collect();
    Ok(InfluenceSummary {
        names: order.iter().map(|&i| head_names[i].clone()).collect(),
        order,
        steps,
        rows,
    })
}

pub fn write_summary_csv<W: Write>(out: W, summary: &InfluenceSummary) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend(summary.names.iter().cloned());
    w.write_record(&header)?;
    for (step, row) in summary.steps.iter().zip(&summary.rows) {
        let mut rec = vec![step.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
