use proptest::prelude::*;
use tempo_core::paths::{PathFamily, PathParams, PathSchedule, VarianceConvention};

const FD_STEP: f64 = 1e-5;

fn rel_err(exact: f64, approx: f64) -> f64 {
    (exact - approx).abs() / exact.abs().max(1e-6)
}

fn family() -> impl Strategy<Value = PathFamily> {
    prop::sample::select(PathFamily::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn derivatives_match_central_differences(f in family(), t in 0.01f64..0.99) {
        let p = PathSchedule::default_for(f);
        let d = p.derivatives(t).unwrap();
        let (hi, lo) = (p.coefficients(t + FD_STEP).unwrap(), p.coefficients(t - FD_STEP).unwrap());
        let fd = |a: f64, b: f64| (a - b) / (2.0 * FD_STEP);
        prop_assert!(rel_err(d.a, fd(hi.a, lo.a)) < 1e-6, "a′ {} vs {}", d.a, fd(hi.a, lo.a));
        prop_assert!(rel_err(d.b, fd(hi.b, lo.b)) < 1e-6, "b′ {} vs {}", d.b, fd(hi.b, lo.b));
        prop_assert!(rel_err(d.s, fd(hi.s, lo.s)) < 1e-6, "s′ {} vs {}", d.s, fd(hi.s, lo.s));
    }

    #[test]
    fn target_is_time_derivative_of_sample(
        f in family(),
        t in 0.01f64..0.99,
        z in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let p = PathSchedule::default_for(f);
        let (z0, z1, eps) = (&z[0..4], &z[4..8], &z[8..12]);
        let at = |t: f64| p.sample_conditional(z0, z1, t, eps).unwrap();
        let (u, up, dn) = (at(t).u_target, at(t + FD_STEP).z_t, at(t - FD_STEP).z_t);
        for i in 0..4 {
            let fd = (up[i] - dn[i]) / (2.0 * FD_STEP);
            prop_assert!((u[i] - fd).abs() <= 1e-6 * u[i].abs().max(1.0), "{} vs {fd}", u[i]);
        }
    }

    #[test]
    fn sample_is_linear_in_endpoints(
        f in family(),
        t in 0.0f64..=1.0,
        z in prop::collection::vec(-3.0f64..3.0, 6),
        k in -2.0f64..2.0,
    ) {
        let p = PathSchedule::default_for(f);
        let zero = [0.0; 2];
        let one = p.sample_conditional(&z[0..2], &z[2..4], t, &z[4..6]).unwrap().z_t;
        let scaled: Vec<f64> = z.iter().map(|v| k * v).collect();
        let two = p.sample_conditional(&scaled[0..2], &scaled[2..4], t, &scaled[4..6]).unwrap().z_t;
        let none = p.sample_conditional(&zero, &zero, t, &zero).unwrap().z_t;
        for i in 0..2 {
            prop_assert!((two[i] - k * one[i]).abs() <= 1e-12 * (1.0 + one[i].abs()));
            prop_assert_eq!(none[i], 0.0);
        }
    }
}

#[test]
fn degenerate_endpoints_are_exact() {
    let data = [0.3, -1.7, 2.5];
    let prior = [1.1, 0.4, -0.9];
    let eps = [0.8, -0.2, 1.3];

    let affine = PathSchedule::new(PathFamily::Affine, PathParams { eps_min: Some(0.0), ..PathParams::NONE }, VarianceConvention::Table).unwrap();
    let (z0, z1) = affine.assign(&data, &prior);
    let c = affine.coefficients(1.0).unwrap();
    let z: Vec<f64> = (0..3).map(|i| c.a * z0[i] + c.b * z1[i] + c.s * eps[i]).collect();
    assert_eq!(z, data);

    let river =
        PathSchedule::new(PathFamily::River, PathParams { sigma: Some(0.1), sigma_min: Some(0.0), ..PathParams::NONE }, VarianceConvention::Table)
            .unwrap();
    let (z0, z1) = river.assign(&data, &prior);
    assert_eq!(river.sample_conditional(z0, z1, 1.0, &[0.0; 3]).unwrap().z_t, data);
    let c = river.coefficients(1.0).unwrap();
    assert_eq!((c.a, c.b), (0.0, 1.0));

    let vp = PathSchedule::default_for(PathFamily::Vp).coefficients(1.0).unwrap();
    assert_eq!(vp.a, 1.0);
    assert_eq!(vp.s, 0.0);
}
