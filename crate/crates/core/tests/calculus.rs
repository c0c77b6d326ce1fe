use fbsde_core::calculus::*;
use fbsde_core::drivers::{DriverBundle, DriverConfig, GeneratorMatrix};
use fbsde_core::error::Error;
use fbsde_core::forward::{euler_solve, FnCoefficients, ForwardConstants, ForwardSpec, InitialState};
use fbsde_core::timegrid::{Hurst, TimeGrid};

fn residual_at(
    coeffs: &FnCoefficients<f64>,
    q: &GeneratorMatrix<f64>,
    tf: &FnTestFunction<f64>,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> fbsde_core::calculus::ResidualStats<f64> {
    let grid = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
    let hurst = Hurst::new(0.75).unwrap();
    let bundle = DriverBundle::simulate(&DriverConfig {
        grid,
        brownian_dim: 1,
        n_paths,
        hurst,
        generator: q.clone(),
        initial_regime: 0,
        seed,
    })
    .unwrap();
    let spec = ForwardSpec {
        coefficients: coeffs,
        initial: InitialState::Fixed(vec![0.0]),
        constants: ForwardConstants::new(0.0, 0.0, 0.0, 0.0).unwrap(),
    };
    let sol = euler_solve(&spec, &bundle).unwrap();
    let gi = GeneratorInputs { coefficients: coeffs, generator: q, hurst, grid };
    ito_residual(tf, &gi, &bundle, &sol, (0.0, 1.0)).unwrap()
}

fn orders(coeffs: &FnCoefficients<f64>, q: &GeneratorMatrix<f64>, tf: &FnTestFunction<f64>) -> (Vec<f64>, f64) {
    let ns = [50usize, 100, 200, 400];
    let mut dts = Vec::new();
    let mut ms = Vec::new();
    let mut means = Vec::new();
    for n in ns {
        let s = residual_at(coeffs, q, tf, n, 4000, 17);
        dts.push(1.0 / n as f64);
        ms.push(s.rms * s.rms);
        means.push(s.mean);
    }
    (means, fit_order(&dts, &ms).unwrap())
}

#[test]
fn brownian_square_residual_is_centred() {
    let c = FnCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 1.0, |_| 0.0);
    let q = GeneratorMatrix::trivial();
    let s = residual_at(&c, &q, &FnTestFunction::square_norm(), 100, 10_000, 3);
    assert!(s.within(5.0), "{s:?}");
    let (_, order) = orders(&c, &q, &FnTestFunction::square_norm());
    assert!(order >= 0.8, "order {order}");
}

#[test]
fn fbm_square_residual_is_centred() {
    let c = FnCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 1.0);
    let q = GeneratorMatrix::trivial();
    let s = residual_at(&c, &q, &FnTestFunction::square_norm(), 100, 10_000, 5);
    assert!(s.within(5.0), "{s:?}");
    let (_, order) = orders(&c, &q, &FnTestFunction::square_norm());
    assert!(order >= 0.5, "order {order}");
}

#[test]
fn chain_residual_cancels() {
    let c = FnCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 0.0);
    let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
    let s = residual_at(&c, &q, &FnTestFunction::regime_label(), 100, 10_000, 7);
    assert!(s.within(5.0) || s.rms < 1e-10, "{s:?}");
}

#[test]
fn linear_function_residual_is_small_and_centred() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -x, |_, _, _| 0.5, |_| 0.3);
    let q = GeneratorMatrix::trivial();
    let s = residual_at(&c, &q, &FnTestFunction::identity(), 100, 1000, 9);
    assert!(s.within(5.0) && s.rms < 1e-2, "{s:?}");
}

fn inputs<'a>(
    c: &'a FnCoefficients<'a, f64>,
    q: &'a GeneratorMatrix<f64>,
    t_end: f64,
) -> GeneratorInputs<'a, f64> {
    GeneratorInputs {
        coefficients: c,
        generator: q,
        hurst: Hurst::new(0.75).unwrap(),
        grid: TimeGrid::new(0.0, t_end, 64).unwrap(),
    }
}

#[test]
fn ornstein_uhlenbeck_square() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -x, |_, _, _| 1.0, |_| 0.0);
    let q = GeneratorMatrix::trivial();
    let gi = inputs(&c, &q, 1.0);
    let tf = FnTestFunction::square_norm();
    let v = generator_apply(&tf, &gi, 0.5, &[1.5], 0).unwrap();
    assert!((v - (-2.0 * 2.25 + 1.0)).abs() < 1e-14);
}

#[test]
fn fbm_correction_matches_variance_growth() {
    let c = FnCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 1.0);
    let q = GeneratorMatrix::trivial();
    let gi = inputs(&c, &q, 1.0);
    let tf = FnTestFunction::square_norm();
    let v = generator_apply(&tf, &gi, 1.0, &[0.3], 0).unwrap();
    assert!((v - 1.5).abs() < 1e-12);
    let mid = generator_apply(&tf, &gi, 0.37, &[0.3], 0).unwrap();
    assert!((mid - 1.5 * 0.37f64.sqrt()).abs() < 1e-12);
}

#[test]
fn constant_function_has_zero_generator() {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| x.sin(), |_, x, _| x, |t| t);
    let q = GeneratorMatrix::trivial();
    let gi = inputs(&c, &q, 2.0);
    let tf = FnTestFunction::<f64>::new(|_, _, _| 4.0, |_, _, _| 0.0, |_, _, _, g| g[0] = 0.0, |_, _, _, h| h[0] = 0.0);
    assert_eq!(generator_apply(&tf, &gi, 1.3, &[0.7], 0).unwrap(), 0.0);
    assert!(matches!(generator_apply(&tf, &gi, -0.1, &[0.7], 0), Err(Error::Domain(_))));
}

#[test]
fn chain_part() {
    let c = FnCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 0.0);
    let q = GeneratorMatrix::new(&[vec![-2.0, 2.0], vec![0.5, -0.5]]).unwrap();
    let gi = inputs(&c, &q, 1.0);
    let tf = FnTestFunction::regime_label();
    assert_eq!(generator_apply(&tf, &gi, 0.2, &[0.0], 0).unwrap(), 2.0);
    assert_eq!(generator_apply(&tf, &gi, 0.2, &[0.0], 1).unwrap(), -0.5);
}

#[test]
fn test_function_checks() {
    let tf = FnTestFunction::<f64>::square_norm();
    check_test_function(&tf, &[(0.0, vec![0.3, -1.2], 0)]).unwrap();
    let bad = FnTestFunction::<f64>::new(|_, x: &[f64], _| x[0] * x[0], |_, _, _| 0.0, |_, x, _, g| g[0] = x[0], |_, _, _, h| h[0] = 2.0);
    assert!(check_test_function(&bad, &[(0.0, vec![1.0], 0)]).is_err());
}

#[test]
fn order_fit() {
    let h = [0.1, 0.05, 0.025];
    let v: Vec<f64> = h.iter().map(|x| 3.0 * x * x).collect();
    assert!((fit_order(&h, &v).unwrap() - 2.0).abs() < 1e-12);
}
