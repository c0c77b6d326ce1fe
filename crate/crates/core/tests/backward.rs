use fbsde_core::backward::*;
use fbsde_core::drivers::{DriverBundle, DriverConfig, GeneratorMatrix};
use fbsde_core::error::Error;
use fbsde_core::paths::PathSet;
use fbsde_core::timegrid::{Hurst, TimeGrid};

fn bundle(t_end: f64, n_steps: usize, n_paths: usize, seed: u64) -> DriverBundle<f64> {
    DriverBundle::simulate(&DriverConfig {
        grid: TimeGrid::new(0.0, t_end, n_steps).unwrap(),
        brownian_dim: 1,
        n_paths,
        hurst: Hurst::new(0.7).unwrap(),
        generator: GeneratorMatrix::new(&[vec![-0.5, 0.5], vec![0.5, -0.5]]).unwrap(),
        initial_regime: 0,
        seed,
    })
    .unwrap()
}

fn spec<'a>(g: &'a FnDriver<'a, f64>, k: f64) -> BackwardSpec<'a, f64> {
    BackwardSpec { driver: g, constants: BackwardConstants::with_k(k), features: None }
}

#[test]
fn constant_driver_integrates_exactly() {
    let b = bundle(2.0, 200, 200, 1);
    let g = FnDriver::<f64>::scalar(|_, _, _| 1.0);
    let sol = solve_truncated(&spec(&g, 0.0), &b, 2.0).unwrap();
    for p in 0..200 {
        assert!((sol.y.get(p, 0, 0) + 2.0).abs() < 1e-9);
        assert!(sol.z.get(p, 0, 0).abs() < 1e-9);
        assert!(sol.r.get(p, 0, 0).abs() < 1e-9);
    }
    assert!(sol.f.max_abs() < 1e-9);
    for k in 0..=200 {
        let t = b.grid.node(k);
        assert!((sol.y.get(0, k, 0) + (2.0 - t)).abs() < 1e-9);
    }
}

#[test]
fn zero_and_homogeneous_drivers_give_zero() {
    let b = bundle(2.0, 50, 100, 2);
    let g = FnDriver::<f64>::scalar(|_, _, _| 0.0);
    let sol = solve_truncated(&spec(&g, 0.0), &b, 2.0).unwrap();
    assert_eq!(sol.y.max_abs(), 0.0);
    let g = FnDriver::<f64>::scalar(|_, y, _| -y);
    let sol = solve_truncated(&spec(&g, 0.0), &b, 2.0).unwrap();
    assert_eq!(sol.y.max_abs(), 0.0);
    let (_, rep) = solve_infinite(&spec(&FnDriver::<f64>::scalar(|_, _, _| 0.0), 1.0), &b, 1e-6, &[1.0, 2.0]).unwrap();
    assert!(rep.converged);
    assert_eq!(rep.distances, vec![0.0]);
}

#[test]
fn deterministic_driver_matches_integral_with_first_order_error() {
    let mut errs = Vec::new();
    for n in [50usize, 100, 200] {
        let b = bundle(2.0, n, 60, 3);
        let g = FnDriver::<f64>::scalar(|t: f64, _, _| t.cos());
        let sol = solve_truncated(&spec(&g, 0.0), &b, 2.0).unwrap();
        let mut e: f64 = 0.0;
        for k in 0..=n {
            let t = b.grid.node(k);
            e = e.max((sol.y.get(0, k, 0) + (2.0f64.sin() - t.sin())).abs());
        }
        errs.push(e * n as f64);
    }
    assert!(errs.iter().all(|c| *c < 2.0), "{errs:?}");
}

#[test]
fn truncation_levels_converge_to_the_tail_integral() {
    let b = bundle(8.0, 800, 100, 4);
    let g = FnDriver::<f64>::scalar(|t: f64, _, _| (-t).exp());
    let s = spec(&g, 0.1);
    let (sol, rep) = solve_infinite(&s, &b, 1e-12, &[4.0, 6.0, 8.0]).unwrap();
    let y0 = sol.y.get(0, 0, 0);
    assert!((y0 + 1.0).abs() < 0.02, "{y0}");
    assert_eq!(rep.distances.len(), 2);
    let ratio = rep.distances[1] / rep.distances[0];
    let target = (-2.0f64).exp();
    assert!((ratio / target - 1.0).abs() < 0.5, "{ratio}");
}

#[test]
fn compact_support_is_resolved_at_once() {
    let b = bundle(6.0, 300, 60, 5);
    let g = FnDriver::<f64>::scalar(|t: f64, _, _| if t <= 2.0 { 1.0 } else { 0.0 });
    let (_, rep) = solve_infinite(&spec(&g, 0.5), &b, 1e-10, &[2.0, 4.0, 6.0]).unwrap();
    assert!(rep.converged);
    assert_eq!(rep.levels.len(), 2);
}

#[test]
fn estimates_for_the_exponential_driver() {
    let b = bundle(4.0, 400, 100, 6);
    let g = FnDriver::<f64>::scalar(|t: f64, _, _| (-t).exp());
    let mut s = spec(&g, 1.0);
    s.constants.l_mono = 0.25;
    let sol = solve_truncated(&s, &b, 4.0).unwrap();
    let rep = bsde_estimate_check(&s, &sol, &b, 0.5).unwrap();
    assert!(rep.pass && rep.margin > 0.0, "{rep:?}");
    let stab = bsde_stability_check(&s, &sol, &s, &sol, &b, 0.5).unwrap();
    assert_eq!(stab.lhs, 0.0);
    assert!(stab.pass);
    s.constants.l_mono = 0.6;
    assert!(matches!(bsde_estimate_check(&s, &sol, &b, 0.5), Err(Error::InvalidParameter(_))));
}

#[test]
fn collinear_features_are_refused_with_the_step() {
    let b = bundle(1.0, 10, 200, 7);
    let mut feats = PathSet::zeros(200, 11, 2);
    for p in 0..200 {
        for k in 0..11 {
            let w = b.brownian_levels().get(p, k, 0);
            feats.at_mut(p, k).copy_from_slice(&[w, 2.0 * w]);
        }
    }
    let g = FnDriver::<f64>::scalar(|_, y, _| -y + 1.0);
    let s = BackwardSpec { driver: &g, constants: BackwardConstants::with_k(0.0), features: Some(&feats) };
    match solve_truncated(&s, &b, 1.0) {
        Err(Error::Conditioning(msg)) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|s| s.level)),
    }
}

#[test]
fn martingale_representation_of_a_brownian_terminal() {
    // g = −W, so y(t) = W(t)(1 − t) and z(t) = 1 − t.
    let b = bundle(1.0, 100, 4000, 8);
    let w = b.brownian_levels();
    let drv = {
        let w = &w;
        FnDriver::<f64>::new(1, move |s, _, _, _, _, out: &mut [f64]| out[0] = -w.get(s.path, s.node, 0))
    };
    let sp = BackwardSpec { driver: &drv, constants: BackwardConstants::with_k(0.0), features: Some(&w) };
    let sol = solve_truncated(&sp, &b, 1.0).unwrap();
    let mut err = 0.0f64;
    for p in 0..4000 {
        for k in [0usize, 50] {
            let t = b.grid.node(k);
            err = err.max((sol.z.get(p, k, 0) - (1.0 - t)).abs());
        }
    }
    assert!(err < 0.05, "{err}");
    let mut yerr = 0.0f64;
    for p in 0..4000 {
        let want = w.get(p, 50, 0) * 0.5;
        yerr = yerr.max((sol.y.get(p, 50, 0) - want).abs());
    }
    assert!(yerr < 0.05, "{yerr}");
}

#[test]
fn linearity_flag_is_verified() {
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let lin = FnDriver::<f64>::new(1, |s, y, z, r, f, out: &mut [f64]| out[0] = -2.0 * y[0] + 0.5 * z[0] - r[0] + f[0] + s.t);
    check_linear(&lin, &grid, 2, 1, 2, 1).unwrap();
    let nonlin = FnDriver::<f64>::new(1, |_, y: &[f64], _, _, _, out: &mut [f64]| out[0] = y[0].sin());
    assert!(check_linear(&nonlin, &grid, 2, 1, 2, 1).is_err());
}
