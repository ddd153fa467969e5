//! Recorded episodes.

use crate::envs::{EnvError, Environment};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    /// `states[t]` is the observation the action `actions[t]` was taken from.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    pub final_state: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Undiscounted per-component totals.
    pub fn component_totals(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for r in &self.rewards {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

/// Runs one episode to termination or truncation with the given controller.
pub fn run_episode<F>(env: &mut dyn Environment, seed: u64, mut controller: F) -> Result<Episode, EnvError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut ep = Episode::default();
    let mut obs = env.reset(seed);
    loop {
        let action = controller(&obs);
        let out = env.step(&action)?;
        ep.states.push(std::mem::replace(&mut obs, out.obs));
        ep.actions.push(action);
        ep.rewards.push(out.reward_components);
        if out.terminated || out.truncated {
            ep.terminated = out.terminated;
            ep.truncated = out.truncated;
            break;
        }
    }
    ep.final_state = obs;
    ep.success = env.succeeded();
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{GapWalker, GapWalkerConfig};

    #[test]
    fn standing_episode_has_horizon_length() {
        let mut env = GapWalker::new(GapWalkerConfig::default()).unwrap();
        let ep = run_episode(&mut env, 0, |_| vec![0.0]).unwrap();
        assert_eq!(ep.len(), 200);
        assert!(ep.truncated && !ep.terminated && ep.success);
        assert_eq!(ep.component_totals(3), vec![0.0, 0.0, 0.0]);
    }
}
