use lorentz_core::limit_chain::{calibrate_surrogate, KernelBackend};
use lorentz_core::paths::TruncationParams;
use lorentz_core::stats::ks_two_sample;
use lorentz_core::stein::{
    antisymmetry_check, build_pair, check_derivative_bounds, default_probes, leading_error_term, solve_stein,
    stream_surrogate_pair, test_battery, Bump, PairBatch, QuadratureSpec, TestFunction, BOUND_SLACK,
};
use lorentz_core::{make_constants, ModelConstants};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

/// Shared batches of 10^4 replicas at n = 10^3 and n = 10^4.
fn shared_pairs(n: usize) -> &'static PairBatch {
    static SMALL: OnceLock<PairBatch> = OnceLock::new();
    static LARGE: OnceLock<PairBatch> = OnceLock::new();
    match n {
        1_000 => SMALL.get_or_init(|| surrogate_pairs(1_000, 10_000, 1).1),
        10_000 => LARGE.get_or_init(|| surrogate_pairs(10_000, 10_000, 2).1),
        _ => unreachable!(),
    }
}

fn surrogate_pairs(n: usize, replicas: u64, seed: u64) -> (ModelConstants, PairBatch) {
    let c = make_constants(2).unwrap();
    let backend = KernelBackend::SurrogateIid(calibrate_surrogate(&c).unwrap());
    let params = TruncationParams::new(0.5, n).unwrap();
    let records = (0..replicas)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64((seed << 32) | r);
            stream_surrogate_pair(&backend, &[1.0, 0.0], &params, &c, &mut rng).unwrap()
        })
        .collect();
    let batch = PairBatch::new(n, 2, &c, records).unwrap();
    (c, batch)
}

#[test]
fn sine_residual_is_small_in_two_dimensions() {
    let h = TestFunction::SineCoordinate { d: 2, k: 0, freq: 1.0 };
    let sol = solve_stein(&h, &QuadratureSpec::default()).unwrap();
    for w in default_probes(2, 100, 41) {
        assert!(sol.residual(&w).abs() < 1e-4, "{w:?}");
    }
}

#[test]
fn closed_forms_in_two_dimensions() {
    let q = QuadratureSpec::default();
    let lin = solve_stein(&TestFunction::Linear { coef: vec![1.0, 0.0] }, &q).unwrap();
    let sq = solve_stein(
        &TestFunction::CoordinateSquare {
            d: 2,
            k: 0,
            region_radius: 3.0,
        },
        &q,
    )
    .unwrap();
    for w in default_probes(2, 50, 42) {
        assert!((lin.value(&w) + w[0]).abs() < 1e-6);
        assert!((sq.value(&w) - (1.0 - w[0] * w[0]) / 2.0).abs() < 1e-6);
        let g = lin.grad(&w);
        assert!((g[0] + 1.0).abs() < 1e-6 && g[1].abs() < 1e-6);
    }
}

#[test]
fn bounds_for_the_simplest_functions() {
    let q = QuadratureSpec::default();
    let probes: Vec<Vec<f64>> = default_probes(2, 200, 43)
        .into_iter()
        .filter(|w| w[0].hypot(w[1]) <= 3.0)
        .take(100)
        .collect();
    assert_eq!(probes.len(), 100);

    let lin = TestFunction::Linear { coef: vec![1.0, 0.0] };
    let rep = check_derivative_bounds(&lin, &solve_stein(&lin, &q).unwrap(), &probes).unwrap();
    assert!((rep.sup_df - 1.0).abs() < 1e-6 && rep.all_ok(), "{rep:?}");
    assert!((rep.bound_df - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);

    let sq = TestFunction::CoordinateSquare {
        d: 2,
        k: 0,
        region_radius: 3.0,
    };
    let rep = check_derivative_bounds(&sq, &solve_stein(&sq, &q).unwrap(), &probes).unwrap();
    assert!((rep.sup_hess_hs - 1.0).abs() < 1e-6, "{rep:?}");
    assert_eq!(rep.bound_hess_hs, 6.0);
    assert!(rep.all_ok());
}

#[test]
fn battery_solves_and_respects_the_bounds() {
    let q = QuadratureSpec::default();
    let probes = default_probes(2, 100, 44);
    let battery = test_battery(2, 2024);
    assert_eq!(battery.len(), 12);
    for h in &battery {
        let sol = solve_stein(h, &q).unwrap();
        let rep = check_derivative_bounds(h, &sol, &probes).unwrap();
        assert!(rep.max_residual < 1e-3, "{rep:?}");
        assert!(rep.all_ok(), "{rep:?}");
        assert!(rep.sup_d3f <= rep.bound_d3f * (1.0 + BOUND_SLACK));
    }
}

#[test]
fn bump_mixtures_respect_the_bounds() {
    let q = QuadratureSpec::default();
    let probes = default_probes(2, 100, 45);
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for _ in 0..10 {
        let bumps = (0..3)
            .map(|_| Bump {
                center: vec![
                    rand::Rng::random_range(&mut rng, -2.0..2.0),
                    rand::Rng::random_range(&mut rng, -2.0..2.0),
                ],
                width: rand::Rng::random_range(&mut rng, 0.7..1.5),
                amplitude: rand::Rng::random_range(&mut rng, -1.0..1.0),
            })
            .collect();
        let h = TestFunction::BumpMixture { bumps };
        let rep = check_derivative_bounds(&h, &solve_stein(&h, &q).unwrap(), &probes).unwrap();
        assert!(rep.all_ok(), "{rep:?}");
    }
}

#[test]
fn gaussian_bump_smoothing_has_a_closed_form() {
    let b = Bump {
        center: vec![0.4, -0.3],
        width: 0.9,
        amplitude: 0.7,
    };
    let h = TestFunction::GaussianBump(b.clone());
    let sol = solve_stein(&h, &QuadratureSpec::default()).unwrap();
    assert!((sol.eh_z - b.smoothed(&[0.0, 0.0], 1.0)).abs() < 1e-10);
}

#[test]
fn pair_identities_hold_for_the_surrogate_walk() {
    let pairs = shared_pairs(1_000);
    for p in &pairs.records {
        for k in 0..2 {
            let want = p.w[k] + p.v[k] * (p.xi_tilde_new - p.xi_tilde_old) / pairs.scale;
            assert_eq!(p.w_prime[k], want);
        }
    }
    let rep = lorentz_core::stein::verify_pair_identities(pairs).unwrap();
    assert!((rep.slope + 1e-3).abs() <= 1e-4, "{rep:?}");
    assert!(rep.quad_ok(3.0), "{rep:?}");
    // Off-diagonal in particular.
    let off = (rep.quad_lhs[1] - rep.quad_rhs[1]).abs();
    assert!(off <= 3.0 * rep.quad_stderr[1], "{rep:?}");

    let pooled = |f: &dyn Fn(&lorentz_core::stein::PairRecord) -> &Vec<f64>| -> Vec<f64> {
        pairs.records.iter().flat_map(|p| f(p).iter().copied()).collect()
    };
    let ks = ks_two_sample(&pooled(&|p| &p.w), &pooled(&|p| &p.w_prime)).unwrap();
    assert!(ks < 0.02, "{ks}");
}

#[test]
fn forced_copies_give_identical_pairs() {
    let c = make_constants(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let xi: Vec<Vec<f64>> = (0..20)
        .map(|r| (0..50).map(|i| ((r * 50 + i) as f64).sin()).collect())
        .collect();
    let dirs: Vec<Vec<f64>> = (0..20)
        .map(|r| {
            (0..50)
                .flat_map(|i| {
                    let a = (r + i) as f64;
                    [a.cos(), a.sin()]
                })
                .collect()
        })
        .collect();
    let pairs = build_pair(&xi, &dirs, 2, &c, &mut rng, |_, old, _| old, |_| 0.3).unwrap();
    for p in &pairs.records {
        assert_eq!(p.w, p.w_prime);
        assert!(p.mean_step.iter().all(|&x| x == 0.0));
    }
    assert!(build_pair(&[vec![]], &[vec![]], 2, &c, &mut rng, |_, o, _| o, |_| 0.0).is_err());
    assert!(build_pair(&[vec![0.5]], &[vec![1.0, 0.0]], 2, &c, &mut rng, |_, o, _| o, |_| 0.0).is_err());
}

#[test]
fn antisymmetry_mean_vanishes() {
    let pairs = shared_pairs(1_000);
    for h in test_battery(2, 2024).iter() {
        let sol = solve_stein(h, &QuadratureSpec::coarse()).unwrap();
        let m = antisymmetry_check(pairs, &sol);
        assert!(m.within(0.0, 3.0), "{}: {m:?}", h.id());
    }
}

#[test]
fn leading_error_vanishes_for_an_exact_identity() {
    let (_, mut pairs) = surrogate_pairs(200, 200, 3);
    let n = pairs.n as f64;
    for p in &mut pairs.records {
        p.quad_rhs = vec![2.0 / n, 0.0, 0.0, 2.0 / n];
    }
    let h = TestFunction::GaussianBump(Bump {
        center: vec![0.2, 0.1],
        width: 1.0,
        amplitude: 1.0,
    });
    let sol = solve_stein(&h, &QuadratureSpec::coarse()).unwrap();
    let rep = leading_error_term(&pairs, &sol);
    assert!(
        rep.estimate.mean.abs() <= 1e-12 && rep.estimate.stderr <= 1e-12,
        "{rep:?}"
    );
}

fn battery_solutions() -> Vec<lorentz_core::stein::SteinSolution> {
    test_battery(2, 2024)
        .iter()
        .map(|h| solve_stein(h, &QuadratureSpec::coarse()).unwrap())
        .collect()
}

#[test]
fn leading_error_bounds_the_direct_gap() {
    for n in [1_000, 10_000] {
        let pairs = shared_pairs(n);
        for sol in &battery_solutions() {
            let rep = leading_error_term(pairs, sol);
            let slack = sol.max_residual + 3.0 * rep.eh_w.stderr;
            assert!(
                rep.direct_gap <= rep.estimate.mean.abs() + 3.0 * rep.estimate.stderr + slack,
                "{rep:?}"
            );
        }
    }
}

#[test]
fn leading_error_does_not_grow_with_n() {
    let sols = battery_solutions();
    let small: Vec<f64> = sols
        .iter()
        .map(|s| leading_error_term(shared_pairs(1_000), s).estimate.mean.abs())
        .collect();
    let large: Vec<f64> = sols
        .iter()
        .map(|s| leading_error_term(shared_pairs(10_000), s).estimate.mean.abs())
        .collect();
    let grown: Vec<String> = sols
        .iter()
        .zip(small.iter().zip(&large))
        .filter(|(_, (a, b))| b > a)
        .map(|(s, (a, b))| format!("{}: {a:.5} -> {b:.5}", s.h.id()))
        .collect();
    assert!(grown.is_empty(), "{grown:?}");
}
