//! Monte-Carlo component returns and how well value predictions track them.

use std::io::Write;

use super::AnalysisError;

/// Discounted component returns `G[t][i] = r[t][i] + gamma G[t+1][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReturnTrace {
    pub returns: Vec<Vec<f64>>,
    pub gamma: f64,
    pub trajectory_id: usize,
}

pub fn mc_component_returns(rewards: &[Vec<f64>], gamma: f64) -> ComponentReturnTrace {
    let mut returns = vec![Vec::new(); rewards.len()];
    let mut acc: Option<Vec<f64>> = None;
    for t in (0..rewards.len()).rev() {
        let g: Vec<f64> = match &acc {
            None => rewards[t].clone(),
            Some(next) => rewards[t].iter().zip(next).map(|(r, g)| r + gamma * g).collect(),
        };
        returns[t] = g.clone();
        acc = Some(g);
    }
    ComponentReturnTrace {
        returns,
        gamma,
        trajectory_id: 0,
    }
}

/// Mean of the central half: `floor(n/4)` values are dropped from each end.
pub fn iqm(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = v.len() / 4;
    let mid = &v[cut..v.len() - cut];
    Some(mid.iter().sum::<f64>() / mid.len() as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Predictions and realised returns for one trajectory, `[t][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    pub predictions: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub component_names: Vec<String>,
    pub iqm_rmse: Vec<f64>,
    pub iqm_correlation: Vec<f64>,
    /// Per component: windows whose correlation was undefined and counted as 0.
    pub undefined_correlations: Vec<usize>,
    pub trajectories: usize,
    pub skipped_short: usize,
    pub window: usize,
}

/// IQM over trajectories of the RMSE and correlation on each trajectory's last `window` steps.
pub fn prediction_accuracy(
    traces: &[PredictionTrace],
    component_names: &[String],
    window: usize,
) -> Result<AccuracyReport, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::InvalidWindow);
    }
    let m = component_names.len();
    let mut rmses = vec![Vec::new(); m];
    let mut corrs = vec![Vec::new(); m];
    let mut undefined = vec![0; m];
    let mut skipped = 0;
    for tr in traces {
        let len = tr.returns.len();
        if tr.predictions.len() != len {
            return Err(AnalysisError::LengthMismatch {
                predictions: tr.predictions.len(),
                returns: len,
            });
        }
        if len < window {
            skipped += 1;
            continue;
        }
        for i in 0..m {
            let p: Vec<f64> = tr.predictions[len - window..].iter().map(|r| r[i]).collect();
            let g: Vec<f64> = tr.returns[len - window..].iter().map(|r| r[i]).collect();
            rmses[i].push(rmse(&p, &g));
            corrs[i].push(pearson(&p, &g).unwrap_or_else(|| {
                undefined[i] += 1;
                0.0
            }));
        }
    }
    let used = traces.len() - skipped;
    if used == 0 {
        return Err(AnalysisError::NoTrajectories { skipped });
    }
    Ok(AccuracyReport {
        component_names: component_names.to_vec(),
        iqm_rmse: rmses.iter().map(|v| iqm(v).unwrap_or(0.0)).collect(),
        iqm_correlation: corrs.iter().map(|v| iqm(v).unwrap_or(0.0)).collect(),
        undefined_correlations: undefined,
        trajectories: used,
        skipped_short: skipped,
        window,
    })
}

pub fn write_accuracy_csv<W: Write>(out: W, report: &AccuracyReport) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "component",
        "iqm_rmse",
        "iqm_correlation",
        "undefined_correlations",
        "trajectories",
        "skipped_short",
        "window",
    ])?;
    for i in 0..report.component_names.len() {
        w.write_record([
            report.component_names[i].clone(),
            report.iqm_rmse[i].to_string(),
            report.iqm_correlation[i].to_string(),
            report.undefined_correlations[i].to_string(),
            report.trajectories.to_string(),
            report.skipped_short.to_string(),
            report.window.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
