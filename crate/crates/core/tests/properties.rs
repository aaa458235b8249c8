use popctl::adjoint::classify_region;
use popctl::forward::System;
use popctl::model::{default_coefficients, thresholds, ControlRegion, Diffusion, ModelParams, Survival};
use popctl::weighted_grid::{Field3, GridSpec};
use proptest::prelude::*;

fn region() -> impl Strategy<Value = ControlRegion> {
    (0.0..0.4f64, 0.5..1.0f64, 0.0..0.9f64, 1.0..2.0f64, 0.0..0.4f64, 0.5..1.0f64).prop_map(
        |(l1, l2, a1, a2, s1, s2)| ControlRegion { l1, l2, a1, a2, s1, s2 },
    )
}

proptest! {
    #[test]
    fn survival_is_multiplicative(a in 0.0..1.0f64, t1 in 0.0..0.5f64, t2 in 0.0..0.5f64, c in 0.1..3.0f64) {
        let p = ModelParams { mu1_c: c, ..ModelParams::default() };
        let co = default_coefficients(&p).unwrap();
        let pi = |v: f64| co.survival(Survival::Age, v).unwrap();
        let lhs = pi(a + t1 + t2) / pi(a);
        let rhs = pi(a + t1) / pi(a) * (pi(a + t1 + t2) / pi(a + t1));
        prop_assert!((lhs - rhs).abs() <= 1e-14 * lhs.max(1e-300) + 1e-300);
    }

    #[test]
    fn thresholds_are_ordered(c in region()) {
        let p = ModelParams { control: c, ..ModelParams::default() };
        let th = thresholds(&p);
        prop_assert!(th.t0 <= th.t1 + 1e-15);
        prop_assert!(th.t1 <= th.t_star + 1e-15);
    }

    #[test]
    fn weights_are_positive(alpha in 0.05..1.95f64, b in -3.0..3.0f64, x in 0.001..0.999f64) {
        let p = ModelParams { diffusion: Diffusion::Degenerate { alpha }, b_amp: b, ..ModelParams::default() };
        let co = default_coefficients(&p).unwrap();
        let g = co.gamma_weight(x).unwrap();
        let s = co.sigma_weight(x).unwrap();
        prop_assert!(g > 0.0 && g.is_finite());
        prop_assert!(s > 0.0 && s.is_finite());
    }

    #[test]
    fn labels_are_exhaustive(a in 0.0..2.0f64, s in 0.0..1.0f64, t in 0.0..3.0f64) {
        let label = classify_region(a, s, t, 2.0, 1.0);
        let in_a1 = t <= 2.0 - a && t <= 1.0 - s;
        prop_assert_eq!(label == popctl::adjoint::RegionLabel::A1, in_a1);
    }

    #[test]
    fn forward_step_is_linear(seed in 0u64..1000, c in -2.0..2.0f64) {
        use rand::SeedableRng;
        let p = ModelParams::default();
        let g = GridSpec::new(7, 0.25, 2.0, 1.0).unwrap();
        let sys = System::new(&p, &g).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let z = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let mut yz = y.clone();
        yz.axpy(c, &z);
        let lhs = sys.forward_step(&yz, None);
        let mut rhs = sys.forward_step(&y, None);
        rhs.axpy(c, &sys.forward_step(&z, None));
        for (a, b) in lhs.values().iter().zip(rhs.values()) {
            prop_assert!((a - b).abs() <= 1e-13);
        }
    }
}
