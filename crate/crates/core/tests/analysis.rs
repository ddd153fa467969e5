use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sacd_core::analysis::influence::fractional_influence;
use sacd_core::analysis::returns::{iqm, mc_component_returns, pearson};
use sacd_core::replay::{ReplayBuffer, Transition};
use sacd_core::shaping::{clip_target, schedule_weight, sign_penalty, Sign};

/// `G_t = sum_k gamma^k r_{t+k}`, summed forwards with no recursion.
fn forward_return(rewards: &[f64], t: usize, gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut discount = 1.0;
    for r in &rewards[t..] {
        g += discount * r;
        discount *= gamma;
    }
    g
}

#[test]
fn mc_returns_match_forward_sums_on_a_long_episode() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rewards: Vec<Vec<f64>> = (0..1000)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-5.0..0.0), 0.0])
        .collect();
    let gamma = 0.99;
    let trace = mc_component_returns(&rewards, gamma);
    for i in 0..3 {
        let column: Vec<f64> = rewards.iter().map(|r| r[i]).collect();
        for t in [0, 1, 17, 500, 998, 999] {
            let expect = forward_return(&column, t, gamma);
            assert!((trace.returns[t][i] - expect).abs() < 1e-10, "t={t} i={i}");
        }
    }
    assert_eq!(trace.returns[999], rewards[999]);
}

#[test]
fn iqm_drops_a_quarter_from_each_end() {
    let v = [100.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -100.0];
    assert_eq!(iqm(&v), Some(3.5));
    assert_eq!(iqm(&[]), None);
    assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), None);
}

fn transition(k: u64) -> Transition {
    let x = k as f64;
    Transition {
        s: vec![x, -x],
        a: vec![x / 2.0],
        r: vec![x, 1.0],
        s_next: vec![x + 1.0, -x - 1.0],
        terminated: k % 7 == 0,
    }
}

proptest! {
    #[test]
    fn fractional_influence_sums_to_one(v in prop::collection::vec(0.0f64..10.0, 1..8)) {
        let (f, degenerate) = fractional_influence(&v);
        if v.iter().sum::<f64>() > 0.0 {
            prop_assert!(!degenerate);
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(f.iter().all(|x| (0.0..=1.0).contains(x)));
        } else {
            prop_assert!(degenerate);
            prop_assert!(f.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn schedule_is_flat_before_warmup_and_monotone_after(warmup in 0.0f64..1e4, beta in 1e-6f64..1e-2, a in 0u64..100_000, b in 0u64..100_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (wl, wh) = (schedule_weight(lo, warmup, beta), schedule_weight(hi, warmup, beta));
        prop_assert!((0.0..=1.0).contains(&wl) && (0.0..=1.0).contains(&wh));
        if (hi as f64) < warmup {
            prop_assert_eq!(wl, (0.01 * beta).tanh());
            prop_assert_eq!(wh, wl);
        } else if lo as f64 >= warmup {
            prop_assert!(wl <= wh);
        }
    }

    #[test]
    fn clipped_targets_and_penalties_respect_the_sign(y in -1e3f64..1e3) {
        prop_assert!(clip_target(Sign::NonPositive, y) <= 0.0);
        prop_assert!(clip_target(Sign::NonNegative, y) >= 0.0);
        prop_assert_eq!(clip_target(Sign::Free, y), y);
        for sign in [Sign::NonPositive, Sign::NonNegative] {
            let feasible = clip_target(sign, y) == y;
            prop_assert_eq!(sign_penalty(sign, y) == 0.0, feasible || y == 0.0);
            prop_assert!(sign_penalty(sign, y) >= 0.0);
        }
    }

    #[test]
    fn replay_keeps_the_newest_capacity_transitions(capacity in 1usize..20, pushes in 0u64..60) {
        let mut buf = ReplayBuffer::new(capacity, 2).unwrap();
        for k in 0..pushes {
            buf.push(transition(k)).unwrap();
        }
        let kept = (pushes as usize).min(capacity);
        prop_assert_eq!(buf.len(), kept);
        prop_assert_eq!(buf.insertions(), pushes);
        let order: Vec<f64> = buf.iter_oldest_first().map(|t| t.r[0]).collect();
        let expect: Vec<f64> = (pushes - kept as u64..pushes).map(|k| k as f64).collect();
        prop_assert_eq!(order, expect);
        if kept > 0 {
            let batch = buf.sample(32, pushes).unwrap();
            prop_assert_eq!(batch.len(), 32);
            prop_assert_eq!(&batch, &buf.sample(32, pushes).unwrap());
        }
    }
}

#[test]
fn replay_rejects_malformed_transitions() {
    let mut buf = ReplayBuffer::new(4, 2).unwrap();
    let mut t = transition(1);
    t.r.push(0.0);
    assert!(buf.push(t).is_err());
    let mut t = transition(1);
    t.s_next[0] = f64::NAN;
    assert!(buf.push(t).is_err());
    buf.push(transition(1)).unwrap();
    let mut t = transition(2);
    t.a.push(0.0);
    assert!(buf.push(t).is_err());
    assert!(ReplayBuffer::new(4, 2).unwrap().sample(1, 0).is_err());
}
