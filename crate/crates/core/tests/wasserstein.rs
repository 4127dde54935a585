mod common;

use mfg_core::measures::{monotone_coupling, transport_cost, wasserstein2, EmpiricalMeasure};
use proptest::prelude::*;

fn uniform(v: &[f64]) -> EmpiricalMeasure {
    EmpiricalMeasure::from_samples(v).unwrap()
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..=max)
}

proptest! {
    #[test]
    fn equal_size_matches_permutation_enumeration(
        (a, b) in (1usize..=6).prop_flat_map(|n| (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        ))
    ) {
        let fast = wasserstein2(&uniform(&a), &uniform(&b));
        let brute = common::w2_by_permutations(&a, &b);
        prop_assert!((fast - brute).abs() <= 1e-9, "{fast} vs {brute}");
    }

    #[test]
    fn replicated_atoms_give_the_same_distance(a in cloud(3), b in cloud(2)) {
        // 3 | 6 and 2 | 6: lift both to six equal atoms.
        let (ra, rb) = (common::replicate(&a, 6 / a.len()), common::replicate(&b, 6 / b.len()));
        let fast = wasserstein2(&uniform(&a), &uniform(&b));
        prop_assert!((fast - common::w2_by_permutations(&ra, &rb)).abs() <= 1e-9);
    }

    #[test]
    fn metric_axioms(a in cloud(8), b in cloud(8), c in cloud(8)) {
        let (ma, mb, mc) = (uniform(&a), uniform(&b), uniform(&c));
        let ab = wasserstein2(&ma, &mb);
        prop_assert!(wasserstein2(&ma, &ma) <= 1e-12);
        prop_assert!((ab - wasserstein2(&mb, &ma)).abs() <= 1e-12);
        prop_assert!(ab <= wasserstein2(&ma, &mc) + wasserstein2(&mc, &mb) + 1e-9);
    }

    #[test]
    fn translation_moves_by_the_shift(a in cloud(8), shift in -5.0f64..5.0) {
        let m = uniform(&a);
        prop_assert!((wasserstein2(&m, &m.shifted(shift)) - shift.abs()).abs() <= 1e-9);
    }

    #[test]
    fn monotone_coupling_has_the_right_marginals(a in cloud(7), b in cloud(5)) {
        let (ma, mb) = (uniform(&a), uniform(&b));
        let cells = monotone_coupling(&ma, &mb);
        let total: f64 = cells.iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        let mean_x: f64 = cells.iter().map(|c| c.weight * c.x).sum();
        let mean_y: f64 = cells.iter().map(|c| c.weight * c.y).sum();
        prop_assert!((mean_x - ma.mean()).abs() <= 1e-9);
        prop_assert!((mean_y - mb.mean()).abs() <= 1e-9);
        prop_assert!((transport_cost(&cells).sqrt() - wasserstein2(&ma, &mb)).abs() <= 1e-9);
    }
}

#[test]
fn known_distances() {
    assert!((wasserstein2(&uniform(&[0.0]), &uniform(&[3.0])) - 3.0).abs() < 1e-12);
    // ½δ₀ + ½δ₂ against δ₁: every unit of mass moves by 1.
    assert!((wasserstein2(&uniform(&[0.0, 2.0]), &uniform(&[1.0])) - 1.0).abs() < 1e-12);
}
