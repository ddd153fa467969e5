//! Finite MDPs with vector rewards and exact per-component policy evaluation.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a][i]`
    pub rewards: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
}

fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

impl TabularMdp {
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        n_components: usize,
        gamma: f64,
    ) -> Self {
        let transitions = (0..n_states)
            .map(|_| (0..n_actions).map(|_| random_distribution(rng, n_states)).collect())
            .collect();
        let rewards = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| (0..n_components).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        }
    }

    pub fn n_components(&self) -> usize {
        self.rewards[0][0].len()
    }

    pub fn random_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|_| random_distribution(rng, self.n_actions))
            .collect()
    }

    /// Q-values of `policy` for the scalar reward `reward(s, a)`, by iterating
    /// the Bellman expectation operator until the sup-norm change is below
    /// `1e-15` (relative to the value scale).
    pub fn evaluate<F: Fn(usize, usize) -> f64>(&self, policy: &[Vec<f64>], reward: F) -> Vec<Vec<f64>> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut q = vec![vec![0.0; na]; ns];
        for _ in 0..100_000 {
            let v: Vec<f64> = (0..ns)
                .map(|s| policy[s].iter().zip(&q[s]).map(|(p, x)| p * x).sum())
                .collect();
            let mut delta = 0.0f64;
            let mut scale = 1.0f64;
            for s in 0..ns {
                for a in 0..na {
                    let next: f64 = self.transitions[s][a].iter().zip(&v).map(|(p, x)| p * x).sum();
                    let new = reward(s, a) + self.gamma * next;
                    delta = delta.max((new - q[s][a]).abs());
                    scale = scale.max(new.abs());
                    q[s][a] = new;
                }
            }
            if delta <= 1e-15 * scale {
                break;
            }
        }
        q
    }

    /// Per-component Q-functions `Q_i(s, a)`, indexed `[i][s][a]`.
    pub fn component_q(&self, policy: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_components())
            .map(|i| self.evaluate(policy, |s, a| self.rewards[s][a][i]))
            .collect()
    }

    pub fn composite_reward(&self, w: &[f64], s: usize, a: usize) -> f64 {
        self.rewards[s][a].iter().zip(w).map(|(r, wi)| r * wi).sum()
    }
}
