use fbsde_core::drivers::{DriverBundle, DriverConfig, GeneratorMatrix};
use fbsde_core::error::Error;
use fbsde_core::forward::*;
use fbsde_core::timegrid::{Hurst, TimeGrid};

fn bundle(t_end: f64, n_steps: usize, n_paths: usize, seed: u64) -> DriverBundle<f64> {
    DriverBundle::simulate(&DriverConfig {
        grid: TimeGrid::new(0.0, t_end, n_steps).unwrap(),
        brownian_dim: 1,
        n_paths,
        hurst: Hurst::new(0.7).unwrap(),
        generator: GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
        initial_regime: 0,
        seed,
    })
    .unwrap()
}

fn constants(kappa: f64, l_b: f64, l_s: f64, k: f64) -> ForwardConstants<f64> {
    ForwardConstants::new(kappa, l_b, l_s, k).unwrap()
}

#[test]
fn deterministic_decay_to_inverse_e() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -x, |_, _, _| 0.0, |_| 0.0);
    let b = bundle(1.0, 1000, 2, 1);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![1.0]), constants: constants(1.0, 1.0, 0.0, 0.0) };
    let sol = euler_solve(&spec, &b).unwrap();
    assert!((sol.x.get(0, 1000, 0) - (-1.0f64).exp()).abs() < 1e-3);
}

#[test]
fn pure_fbm_integrator_reproduces_the_path() {
    let c = FnCoefficients::<f64>::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 1.0);
    let b = bundle(1.0, 64, 8, 2);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![0.0]), constants: constants(0.0, 0.0, 0.0, 0.0) };
    let sol = euler_solve(&spec, &b).unwrap();
    for p in 0..8 {
        for k in 0..=64 {
            assert!((sol.x.get(p, k, 0) - b.fbm.value(p, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn brownian_variance_at_one() {
    let c = FnCoefficients::<f64>::scalar(|_, _, _| 0.0, |_, _, _| 1.0, |_| 0.0);
    let b = bundle(1.0, 50, 10_000, 3);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![0.0]), constants: constants(0.0, 0.0, 1.0, 0.0) };
    let sol = euler_solve(&spec, &b).unwrap();
    let v: Vec<f64> = (0..10_000).map(|p| sol.x.get(p, 50, 0).powi(2)).collect();
    let mean = v.iter().sum::<f64>() / 1e4;
    let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 9999.0).sqrt();
    assert!((mean - 1.0).abs() < 5.0 * sd / 100.0, "{mean}");
}

#[test]
fn non_finite_coefficient_is_reported_with_context() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| 1.0 / (x - x), |_, _, _| 0.0, |_| 0.0);
    let b = bundle(1.0, 4, 2, 4);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![0.5]), constants: constants(0.0, 0.0, 0.0, 0.0) };
    match euler_solve(&spec, &b) {
        Err(Error::Coefficient { name, x, .. }) => {
            assert_eq!(name, "b");
            assert_eq!(x, vec![0.5]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn picard_contracts_and_reaches_euler() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -x, |_, _, _| 0.0, |_| 0.0);
    let b = bundle(1.0, 200, 200, 5);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![1.0]), constants: constants(1.0, 1.0, 0.0, 0.0) };
    let (sol, report) = picard_solve(&spec, &b, 1.0, 16.0, 1e-3, 50).unwrap();
    assert!((report.factor - 0.25).abs() < 1e-6);
    assert!(report.converged);
    for r in &report.ratios {
        assert!(*r <= 0.30, "{:?}", report.ratios);
    }
    let euler = euler_solve(&spec, &b).unwrap();
    let d = equivalent_sq_distance(&sol.x, &euler.x, 16.0, &b.grid).unwrap().sqrt();
    assert!(d < 1e-3, "{d}");
}

#[test]
fn picard_fixed_point_in_one_iteration() {
    let c = FnCoefficients::<f64>::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 0.0);
    let b = bundle(1.0, 20, 10, 6);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![2.0]), constants: constants(0.0, 1.0, 0.0, 0.0) };
    let (_, report) = picard_solve(&spec, &b, 1.0, 16.0, 1e-9, 10).unwrap();
    assert_eq!(report.iterations, 1);
    assert_eq!(report.distances[0], 0.0);
}

#[test]
fn picard_refuses_small_weight() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -x, |_, _, _| 0.0, |_| 0.0);
    let b = bundle(1.0, 20, 10, 6);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![2.0]), constants: constants(1.0, 1.0, 0.0, 0.0) };
    assert!(matches!(picard_solve(&spec, &b, 1.0, 2.0, 1e-3, 10), Err(Error::ContractionRefused(_))));
}

#[test]
fn probes_of_monotone_and_expanding_drifts() {
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let window = ProbeBox { lo: -5.0, hi: 5.0 };
    let c = FnCoefficients::<f64>::scalar(|_, x: f64, _| -2.0 * x + x.sin(), |_, _, _| 0.0, |_| 0.0);
    let r = probe_assumption_a(&c, &constants(1.0, 3.0, 0.0, 0.0), &grid, 2, 2000, window, 1).unwrap();
    assert!(r.kappa_x >= 1.0);
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    let c = FnCoefficients::<f64>::scalar(|_, x, _| x, |_, _, _| 0.0, |_| 0.0);
    let r = probe_assumption_a(&c, &constants(1.0, 1.0, 0.0, 0.0), &grid, 1, 500, window, 1).unwrap();
    assert!(!r.violations.is_empty());
}

#[test]
fn decay_of_ornstein_uhlenbeck() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -2.0 * x, |_, _, _| 1.0, |_| 0.0);
    let b = bundle(5.0, 500, 10_000, 8);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![0.0]), constants: constants(2.0, 2.0, 0.0, -1.0) };
    let sol = euler_solve(&spec, &b).unwrap();
    let rep = decay_diagnostic(&sol, -1.0).unwrap();
    let last = *rep.curve.last().unwrap();
    assert!(last < 1e-4, "{last}");
    assert!(rep.decaying);
    for k in 101..rep.curve.len() {
        assert!(rep.curve[k] < rep.curve[k - 1], "non-monotone at {k}");
    }
    let grow = decay_diagnostic(&sol, 3.0).unwrap();
    assert!(!grow.decaying);
    let apriori = apriori_check(&spec, &sol, &b, 0.5).unwrap();
    assert!(apriori.pass && apriori.margin > 0.0);
    let stab = apriori_stability(&spec, &sol, &spec, &sol, &b, 0.5).unwrap();
    assert_eq!(stab.lhs, 0.0);
    assert!(stab.pass);
    assert!(matches!(apriori_check(&spec, &sol, &b, 3.5), Err(Error::InvalidParameter(_))));
}

#[test]
fn decay_of_zero_solution() {
    let c = FnCoefficients::<f64>::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 0.0);
    let b = bundle(2.0, 20, 100, 9);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![0.0]), constants: constants(1.0, 0.0, 0.0, 0.0) };
    let sol = euler_solve(&spec, &b).unwrap();
    let rep = decay_diagnostic(&sol, 0.0).unwrap();
    assert!(rep.curve.iter().all(|v| *v == 0.0));
    let ap = apriori_check(&spec, &sol, &b, 0.5).unwrap();
    assert_eq!(ap.lhs, 0.0);
    assert_eq!(ap.rhs, 0.0);
    assert!(ap.pass);
}

#[test]
fn euler_strong_self_consistency() {
    let c = FnCoefficients::<f64>::scalar(|_, x: f64, i| if i == 0 { -x } else { -2.0 * x + 0.5 * x.sin() }, |_, x, _| 0.3 * x + 0.5, |_| 0.4);
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![1.0]), constants: constants(1.0, 2.5, 0.3, 0.0) };
    let fine = bundle(1.0, 1024, 2000, 10);
    let x_fine = euler_solve(&spec, &fine).unwrap();
    let mut errs = Vec::new();
    let mut hs = Vec::new();
    for coarse in [32usize, 64, 128, 256] {
        let b = coarsen(&fine, coarse);
        let sol = euler_solve(&spec, &b).unwrap();
        let mut e = 0.0;
        for p in 0..2000 {
            e += (sol.x.get(p, coarse, 0) - x_fine.x.get(p, 1024, 0)).powi(2);
        }
        errs.push((e / 2000.0).sqrt());
        hs.push(1.0 / coarse as f64);
    }
    let slope = fbsde_core::calculus::fit_order(&hs, &errs).unwrap();
    assert!(slope >= 0.4, "{slope} {errs:?}");
}

/// Same driver realisations on a coarser grid.
fn coarsen(fine: &DriverBundle<f64>, n: usize) -> DriverBundle<f64> {
    use fbsde_core::drivers::{BrownianIncrements, FbmPaths, RegimePaths};
    use fbsde_core::paths::PathSet;
    let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
    let r = fine.grid.n_steps() / n;
    let np = fine.n_paths();
    let mut dw = PathSet::zeros(np, n, 1);
    let mut bh = PathSet::zeros(np, n + 1, 1);
    for p in 0..np {
        for k in 0..n {
            let mut s = 0.0;
            for j in 0..r {
                s += fine.dw(p, k * r + j)[0];
            }
            dw.at_mut(p, k)[0] = s;
        }
        for k in 0..=n {
            bh.at_mut(p, k)[0] = fine.fbm.value(p, k * r);
        }
    }
    let regimes = RegimePaths::from_jumps(&grid, fine.m(), fine.regimes.paths.clone()).unwrap();
    DriverBundle::from_parts(
        fine.seed,
        fine.generator.clone(),
        BrownianIncrements { grid, increments: dw },
        FbmPaths { grid, hurst: fine.hurst(), values: bh },
        regimes,
    )
    .unwrap()
}
