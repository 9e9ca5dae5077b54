use lorentz_core::billiard::{random_departure, BilliardWalker, LatticeConfig, LatticeScaling};
use lorentz_core::limit_chain::{
    calibrate_surrogate, mixing_series, sample_free_path, step_chain, ChainState, EmpiricalTable, KernelBackend,
    Resampling, Surrogate,
};
use lorentz_core::make_constants;
use lorentz_core::paths::TruncationParams;
use lorentz_core::stats::{ks_two_sample, mixing_fit, MixingFit};
use lorentz_core::vector::norm;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn surrogate(d: usize) -> Surrogate {
    calibrate_surrogate(&make_constants(d).unwrap()).unwrap()
}

/// Composite Simpson on the plateau plus the tail mapped to `(0, 1]` by
/// `x = x0 / s`.
fn quadrature_moment(s: &Surrogate, k: i32) -> f64 {
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, m: usize| {
        let h = (b - a) / m as f64;
        let mut acc = f(a) + f(b);
        for i in 1..m {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let head = simpson(&|x| x.powi(k) * s.density(x.max(f64::MIN_POSITIVE)), 0.0, s.x0, 2000);
    let tail = simpson(
        &|u: f64| {
            if u == 0.0 {
                // Limit of the tail integrand, finite for k <= 1.
                return if k == 1 { s.theta / s.x0 } else { 0.0 };
            }
            let x = (s.x0 / u).next_up();
            x.powi(k) * s.density(x) * s.x0 / (u * u)
        },
        0.0,
        1.0,
        2000,
    );
    head + tail
}

#[test]
fn surrogate_constraints_hold_by_quadrature() {
    for d in 2..=6 {
        let s = surrogate(d);
        assert!((quadrature_moment(&s, 0) - 1.0).abs() < 1e-10, "mass d={d}");
        assert!(
            (quadrature_moment(&s, 1) - s.xi_bar).abs() < 1e-10,
            "mean d={d}: {} vs {}",
            quadrature_moment(&s, 1),
            s.xi_bar
        );
    }
}

#[test]
fn surrogate_sample_mean_matches_calibrated_mean() {
    let backend = KernelBackend::SurrogateIid(surrogate(2));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..1_000_000).map(|_| sample_free_path(&backend, &mut rng)).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 0.5).abs() < 3.0 * (var / n).sqrt(), "mean {mean}");
}

#[test]
fn empirical_draws_come_from_the_table() {
    let t = EmpiricalTable::new(2, vec![(0.3, 1.0), (0.6, 2.0)], Resampling::Independent).unwrap();
    let backend = KernelBackend::Empirical(t);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let x = sample_free_path(&backend, &mut rng);
        assert!(x == 0.3 || x == 0.6);
    }
}

#[test]
fn head_on_table_reverses_velocity() {
    let t = EmpiricalTable::new(3, vec![(0.5, std::f64::consts::PI)], Resampling::Paired).unwrap();
    let backend = KernelBackend::Empirical(t);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v0 = [0.6, 0.0, 0.8];
    let mut state = ChainState::initial(&v0, &backend, &mut rng).unwrap();
    assert_eq!(state.v, vec![-0.6, -0.0, -0.8]);
    for _ in 0..10 {
        let next = step_chain(&state, &backend, &mut rng);
        assert_eq!(next.v, state.v.iter().map(|x| -x).collect::<Vec<_>>());
        state = next;
    }
}

fn run_velocities(backend: &KernelBackend, d: usize, steps: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v0 = vec![0.0; d];
    v0[0] = 1.0;
    let mut state = ChainState::initial(&v0, backend, &mut rng).unwrap();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(state.v.clone());
        state = step_chain(&state, backend, &mut rng);
    }
    out
}

#[test]
fn surrogate_velocities_are_isotropic() {
    let steps = 1_000_000;
    let vs = run_velocities(&KernelBackend::SurrogateIid(surrogate(2)), 2, steps, 4);
    let mean: Vec<f64> = (0..2)
        .map(|k| vs.iter().map(|v| v[k]).sum::<f64>() / steps as f64)
        .collect();
    assert!(norm(&mean) < 4.0 / (steps as f64).sqrt());
    assert!(vs.iter().all(|v| (norm(v) - 1.0).abs() < 1e-12));

    let vs = run_velocities(&KernelBackend::SurrogateIid(surrogate(3)), 3, steps, 5);
    for k in 0..3 {
        let sq: Vec<f64> = vs.iter().map(|v| v[k] * v[k]).collect();
        let m = sq.iter().sum::<f64>() / steps as f64;
        let var = sq.iter().map(|x| (x - m).powi(2)).sum::<f64>() / steps as f64;
        assert!(
            (m - 1.0 / 3.0).abs() < 3.0 * (var / steps as f64).sqrt(),
            "coord {k}: {m}"
        );
    }
    // Odd products vanish.
    let prods: Vec<f64> = vs.iter().map(|v| v[0] * v[1] * v[2]).collect();
    let m = prods.iter().sum::<f64>() / steps as f64;
    let var = prods.iter().map(|x| (x - m).powi(2)).sum::<f64>() / steps as f64;
    assert!(m.abs() < 3.0 * (var / steps as f64).sqrt());
}

#[test]
fn projections_on_different_axes_share_a_law() {
    let steps = 1_000_000;
    let vs = run_velocities(&KernelBackend::SurrogateIid(surrogate(3)), 3, steps, 6);
    let e = [1.0, 0.0, 0.0];
    let f = [0.0, 0.6, -0.8];
    let a: Vec<f64> = vs.iter().map(|v| v.iter().zip(&e).map(|(x, y)| x * y).sum()).collect();
    let b: Vec<f64> = vs.iter().map(|v| v.iter().zip(&f).map(|(x, y)| x * y).sum()).collect();
    assert!(ks_two_sample(&a, &b).unwrap() < 0.01);
}

#[test]
fn iid_surrogate_has_no_lagged_covariance() {
    let vs = run_velocities(&KernelBackend::SurrogateIid(surrogate(2)), 2, 200_000, 7);
    let series: Vec<f64> = vs.iter().map(|v| v[0]).collect();
    let m = mixing_series(&series, 5).unwrap();
    for k in 1..=5 {
        assert!(m.cov[k].abs() <= 3.0 * m.stderr[k], "lag {k}");
    }
    assert_eq!(mixing_fit(&m).unwrap(), MixingFit::NoDecayDetected);
}

#[test]
fn billiard_table_chain_mixes_geometrically() {
    let config = LatticeConfig::new(2, 0.005, LatticeScaling::BoltzmannGrad).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let walker = BilliardWalker::new(config.clone(), random_departure(&config, &mut rng)).unwrap();
    let flights: Vec<_> = walker.take(200_000).collect();
    let table = EmpiricalTable::from_flights(2, &flights, Resampling::Paired).unwrap();
    let backend = KernelBackend::Empirical(table);

    let steps = 500_000;
    let r_n = TruncationParams::new(0.5, steps).unwrap().r_n;
    let mut state = ChainState::initial(&[1.0, 0.0], &backend, &mut rng).unwrap();
    let mut series = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = step_chain(&state, &backend, &mut rng);
        let xi = if next.xi <= r_n { next.xi } else { 0.0 };
        series.push(state.v[0] * xi);
        state = next;
    }
    let m = mixing_series(&series, 8).unwrap();
    match mixing_fit(&m).unwrap() {
        MixingFit::Decay { omega, .. } => assert!(omega < 1.0),
        MixingFit::NoDecayDetected => panic!("no decay detected: {:?}", m.cov),
    }
}

proptest! {
    #[test]
    fn inverse_cdf_is_exact(u in 1e-9f64..1.0 - 1e-9, d in 2usize..7) {
        let s = surrogate(d);
        prop_assert!((s.cdf(s.inverse_cdf(u)) - u).abs() < 1e-12);
    }

    #[test]
    fn surrogate_steps_stay_on_the_sphere(seed in any::<u64>(), d in 2usize..6) {
        let backend = KernelBackend::SurrogateIid(surrogate(d));
        for v in run_velocities(&backend, d, 200, seed) {
            prop_assert!((norm(&v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_steps_turn_by_the_table_angle(seed in any::<u64>(), theta in 0.01f64..3.1) {
        let t = EmpiricalTable::new(3, vec![(1.0, theta)], Resampling::Paired).unwrap();
        let backend = KernelBackend::Empirical(t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ChainState::initial(&[0.0, 0.0, 1.0], &backend, &mut rng).unwrap();
        for _ in 0..50 {
            let next = step_chain(&state, &backend, &mut rng);
            let c: f64 = next.v.iter().zip(&state.v).map(|(a, b)| a * b).sum();
            prop_assert!((c - theta.cos()).abs() < 1e-12);
            prop_assert!((norm(&next.v) - 1.0).abs() < 1e-12);
            state = next;
        }
    }
}
