use ltm_core::lattice::{Action, LatticeGeometry, PhiFour, PhiFourParams};
use ltm_core::metrics::{self, BootstrapConfig};
use ltm_core::ordering::{conditioning_sets, exact_dependency_sets, NeighborhoodSpec, OrderingKind};
use ltm_core::transport::{MapInit, MapMode, MapSpec, TriangularMap};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORDERINGS: [OrderingKind; 3] = [
    OrderingKind::Lexicographic,
    OrderingKind::Checkerboard,
    OrderingKind::Maxmin,
];

fn phi_four(extent: usize, m0_sq: f64, lambda0: f64) -> PhiFour {
    PhiFour::new(
        LatticeGeometry::square(extent).unwrap(),
        PhiFourParams::new(m0_sq, lambda0).unwrap(),
    )
}

fn field(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn action_is_invariant_under_translation_and_sign_flip(phi in field(16), shift in 0usize..4) {
        let s = phi_four(4, -4.0, 8.0);
        let geom = &s.geom;
        let moved: Vec<f64> = (0..16).map(|site| phi[geom.shifted(site, &[shift as isize, 1])]).collect();
        let flipped: Vec<f64> = phi.iter().map(|v| -v).collect();
        let base = s.action(&phi);
        prop_assert!((s.action(&moved) - base).abs() <= 1e-12 * base.abs().max(1.0));
        prop_assert!((s.action(&flipped) - base).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn action_gradient_matches_central_differences(phi in field(16), m0_sq in -4.0..2.0f64, lambda0 in 0.0..10.0f64) {
        let s = phi_four(4, m0_sq, lambda0);
        let mut grad = vec![0.0; 16];
        s.gradient(&phi, &mut grad);
        let h = 1e-5;
        for i in 0..16 {
            let mut p = phi.clone();
            p[i] += h;
            let up = s.action(&p);
            p[i] -= 2.0 * h;
            let fd = (up - s.action(&p)) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() < 1e-6 * grad[i].abs().max(1.0), "site {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn ess_lies_in_unit_interval_and_ignores_common_shifts(
        logw in prop::collection::vec(-50.0..50.0f64, 1..200),
        shift in -700.0..700.0f64,
    ) {
        let e = metrics::ess(&logw);
        prop_assert!(e >= 1.0 / logw.len() as f64 - 1e-12 && e <= 1.0 + 1e-12);
        let shifted: Vec<f64> = logw.iter().map(|w| w + shift).collect();
        prop_assert!((metrics::ess(&shifted) - e).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_interval_brackets_the_sample_mean(
        series in prop::collection::vec(-5.0..5.0f64, 20..200),
        block in 1usize..8,
        seed in any::<u64>(),
    ) {
        let cfg = BootstrapConfig { resamples: 200, level: 0.95, block, seed };
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let r = metrics::bootstrap_ci(&series, mean, &cfg);
        prop_assert_eq!(r.estimate, mean(&series));
        prop_assert!(r.lower <= r.upper);
        prop_assert!(r.lower <= r.estimate + 1e-12 && r.estimate <= r.upper + 1e-12);
    }

    #[test]
    fn conditioning_sets_are_past_subsets_of_exact_sets(which in 0usize..3, half in 2usize..5, order in 1u8..4) {
        let extent = 2 * half;
        let geom = LatticeGeometry::square(extent).unwrap();
        let ordering = ORDERINGS[which].build(&geom).unwrap();
        let sparse = conditioning_sets(&ordering, NeighborhoodSpec::new(order).unwrap(), &geom);
        let first = conditioning_sets(&ordering, NeighborhoodSpec::new(1).unwrap(), &geom);
        let exact = exact_dependency_sets(&ordering, &geom);
        prop_assert_eq!(first.total_size(), 2 * geom.n_sites());
        for j in 0..geom.n_sites() {
            prop_assert!(sparse.get(j).iter().all(|&k| k < j));
            prop_assert!(exact.get(j).iter().all(|&k| k < j));
            prop_assert!(first.get(j).iter().all(|k| exact.get(j).contains(k)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_maps_invert_and_save_losslessly(which in 0usize..3, seed in any::<u64>()) {
        let spec = MapSpec::new(4, ORDERINGS[which], MapMode::Sparse, NeighborhoodSpec::new(2).unwrap())
            .with_hidden(&[8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = TriangularMap::new(spec, MapInit::Random, &mut rng).unwrap();
        let z = Array2::from_shape_fn((4, 16), |(b, i)| ((b * 16 + i) as f64 * 0.37).sin() * 2.0);
        let out = map.forward(z.view()).unwrap();
        // random maps can be nearly flat, so z is only recoverable up to the slope; compare fields instead
        let back = map.inverse(out.phi.view()).unwrap();
        let again = map.forward(back.view()).unwrap().phi;
        for (a, b) in again.iter().zip(out.phi.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }

        let mut bytes = Vec::new();
        map.save(&mut bytes).unwrap();
        let loaded = TriangularMap::load(bytes.as_slice()).unwrap();
        prop_assert_eq!(loaded.forward(z.view()).unwrap(), out);
    }
}
