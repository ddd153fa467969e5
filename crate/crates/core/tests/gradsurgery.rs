use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacd_core::gradsurgery::{cagrad_objective, cagrad_weights, HeadGradients, SolverConfig};

fn grid_min(g: &HeadGradients, c: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=100 {
        for j in 0..=(100 - i) {
            let w = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
            best = best.min(cagrad_objective(&w, g, c).unwrap());
        }
    }
    best
}

#[test]
fn solver_beats_grid_on_random_three_head_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let scale = 10f64.powf(rng.random_range(-1.0..1.0));
                (0..5).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let g = HeadGradients::new(grads).unwrap();
        let w = cagrad_weights(&g, 0.5, &SolverConfig::default()).unwrap();
        assert!(w.iter().all(|x| *x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let f = cagrad_objective(&w, &g, 0.5).unwrap();
        let oracle = grid_min(&g, 0.5);
        assert!(f <= oracle + 1e-6, "case {case}: solver {f} grid {oracle}");
    }
}

#[test]
fn small_norm_head_is_upweighted_against_grid() {
    let g = HeadGradients::new(vec![vec![8.0, 0.0, 0.0], vec![0.0, 0.3, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let w = cagrad_weights(&g, 0.5, &SolverConfig::default()).unwrap();
    assert!(cagrad_objective(&w, &g, 0.5).unwrap() <= grid_min(&g, 0.5) + 1e-6);
    assert!(w[1] > w[0]);
}

proptest! {
    #[test]
    fn weights_invariant_to_positive_scaling(
        raw in prop::collection::vec(-5.0f64..5.0, 12),
        scale in 0.01f64..100.0,
    ) {
        let grads: Vec<Vec<f64>> = raw.chunks(4).map(|c| c.to_vec()).collect();
        let scaled: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|x| x * scale).collect()).collect();
        let cfg = SolverConfig::default();
        let w1 = cagrad_weights(&HeadGradients::new(grads).unwrap(), 0.5, &cfg).unwrap();
        let w2 = cagrad_weights(&HeadGradients::new(scaled).unwrap(), 0.5, &cfg).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", w1, w2);
        }
    }
}
