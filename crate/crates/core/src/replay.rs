//! Fixed-capacity ring buffer of decomposed transitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::approximator::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("replay capacity must be positive")]
    ZeroCapacity,
    #[error("transition has {got} reward components, buffer holds {expected}")]
    ComponentMismatch { expected: usize, got: usize },
    #[error("transition {field} has length {got}, expected {expected}")]
    ShapeMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("transition contains a non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cannot sample from an empty replay buffer")]
    Empty,
    #[error("index {index} out of range for buffer of size {len}")]
    OutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub s_next: Vec<f64>,
    pub terminated: bool,
}

/// Row-stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub rewards: Matrix,
    pub next_obs: Matrix,
    pub terminated: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.terminated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminated.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Self {
        let rows = |f: &dyn Fn(&Transition) -> &Vec<f64>| {
            Matrix::from_rows(&items.iter().map(|t| f(t).clone()).collect::<Vec<_>>())
        };
        Self {
            obs: rows(&|t| &t.s),
            actions: rows(&|t| &t.a),
            rewards: rows(&|t| &t.r),
            next_obs: rows(&|t| &t.s_next),
            terminated: items.iter().map(|t| t.terminated).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    num_components: usize,
    dims: Option<(usize, usize)>,
    storage: Vec<Transition>,
    insertions: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, num_components: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            num_components,
            dims: None,
            storage: Vec::new(),
            insertions: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn insertions(&self) -> u64 {
        self.insertions
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        if t.r.len() != self.num_components {
            return Err(ReplayError::ComponentMismatch {
                expected: self.num_components,
                got: t.r.len(),
            });
        }
        if t.s.len() != t.s_next.len() {
            return Err(ReplayError::ShapeMismatch {
                field: "s_next",
                expected: t.s.len(),
                got: t.s_next.len(),
            });
        }
        if let Some((obs_dim, act_dim)) = self.dims {
            if t.s.len() != obs_dim {
                return Err(ReplayError::ShapeMismatch {
                    field: "s",
                    expected: obs_dim,
                    got: t.s.len(),
                });
            }
            if t.a.len() != act_dim {
                return Err(ReplayError::ShapeMismatch {
                    field: "a",
                    expected: act_dim,
                    got: t.a.len(),
                });
            }
        }
        for (name, v) in [("s", &t.s), ("a", &t.a), ("r", &t.r), ("s_next", &t.s_next)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ReplayError::NonFinite(name));
            }
        }
        self.dims = Some((t.s.len(), t.a.len()));
        let slot = (self.insertions % self.capacity as u64) as usize;
        if slot < self.storage.len() {
            self.storage[slot] = t;
        } else {
            self.storage.push(t);
        }
        self.insertions += 1;
        Ok(())
    }

    /// Transition at storage slot `index` (not insertion order).
    pub fn get(&self, index: usize) -> Result<&Transition, ReplayError> {
        self.storage.get(index).ok_or(ReplayError::OutOfRange {
            index,
            len: self.storage.len(),
        })
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            (self.insertions % self.capacity as u64) as usize
        };
        self.storage[split..].iter().chain(self.storage[..split].iter())
    }

    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, ReplayError> {
        if self.storage.is_empty() {
            return Err(ReplayError::Empty);
        }
        let n = self.storage.len();
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    }

    pub fn batch_from_indices(&self, indices: &[usize]) -> Result<Batch, ReplayError> {
        let items = indices
            .iter()
            .map(|&i| self.get(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Batch::from_transitions(&items))
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Batch, ReplayError> {
        let idx = self.sample_indices(batch_size, rng)?;
        self.batch_from_indices(&idx)
    }

    /// Uniform sample with replacement, deterministic in `seed`.
    pub fn sample(&self, batch_size: usize, seed: u64) -> Result<Batch, ReplayError> {
        self.sample_with(batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(tag: f64) -> Transition {
        Transition {
            s: vec![tag, -tag],
            a: vec![tag / 10.0],
            r: vec![tag, 0.5],
            s_next: vec![tag + 1.0, 0.0],
            terminated: tag as i64 % 2 == 0,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(2, 2).unwrap();
        for k in 1..=3 {
            buf.push(tr(k as f64)).unwrap();
        }
        assert_eq!(buf.len(), 2);
        let held: Vec<f64> = buf.iter_oldest_first().map(|t| t.s[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
        assert_eq!(buf.insertions(), 3);
    }

    #[test]
    fn push_validates() {
        let mut buf = ReplayBuffer::new(4, 3).unwrap();
        assert_eq!(
            buf.push(tr(1.0)),
            Err(ReplayError::ComponentMismatch { expected: 3, got: 2 })
        );
        let mut buf = ReplayBuffer::new(4, 2).unwrap();
        let mut bad = tr(1.0);
        bad.r[1] = f64::INFINITY;
        assert_eq!(buf.push(bad), Err(ReplayError::NonFinite("r")));
        buf.push(tr(1.0)).unwrap();
        let mut wide = tr(2.0);
        wide.a.push(0.0);
        assert!(matches!(buf.push(wide), Err(ReplayError::ShapeMismatch { field: "a", .. })));
        assert_eq!(ReplayBuffer::new(0, 1).unwrap_err(), ReplayError::ZeroCapacity);
    }

    #[test]
    fn forced_index_returns_pushed_transition() {
        let mut buf = ReplayBuffer::new(8, 2).unwrap();
        let t = tr(7.25);
        buf.push(t.clone()).unwrap();
        let b = buf.batch_from_indices(&[0]).unwrap();
        assert_eq!(b.obs.row(0), t.s.as_slice());
        assert_eq!(b.actions.row(0), t.a.as_slice());
        assert_eq!(b.rewards.row(0), t.r.as_slice());
        assert_eq!(b.next_obs.row(0), t.s_next.as_slice());
        assert_eq!(b.terminated, vec![t.terminated]);
    }

    #[test]
    fn single_item_buffer_repeats() {
        let mut buf = ReplayBuffer::new(8, 2).unwrap();
        buf.push(tr(3.0)).unwrap();
        let b = buf.sample(5, 1).unwrap();
        assert_eq!(b.len(), 5);
        for r in 0..5 {
            assert_eq!(b.obs.row(r), &[3.0, -3.0]);
        }
    }

    #[test]
    fn empty_buffer_cannot_sample() {
        let buf = ReplayBuffer::new(8, 2).unwrap();
        assert_eq!(buf.sample(1, 0).unwrap_err(), ReplayError::Empty);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut buf = ReplayBuffer::new(50, 2).unwrap();
        for k in 0..50 {
            buf.push(tr(k as f64)).unwrap();
        }
        assert_eq!(buf.sample(16, 5).unwrap(), buf.sample(16, 5).unwrap());
        assert_ne!(buf.sample(16, 5).unwrap(), buf.sample(16, 6).unwrap());
    }
}
