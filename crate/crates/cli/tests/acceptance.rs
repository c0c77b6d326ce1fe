//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use fbsde_core::backward::{
    bsde_estimate_check, bsde_stability_check, solve_backward, solve_infinite, solve_truncated, BackwardConstants,
    BackwardSpec, FnDriver,
};
use fbsde_core::calculus::{fit_order, ito_residual, FnTestFunction, GeneratorInputs, ResidualStats};
use fbsde_core::coupled::{
    solve_fbsde, solve_fbsde_forced, theta_sq_distance, ContinuationOptions, ContinuationTrace, FbsdeSpec, FnCoupled,
    Forcing, GammaHomotopy, LipschitzTable, Theta,
};
use fbsde_core::drivers::{fbm_covariance_table, DriverBundle, DriverConfig, GeneratorMatrix};
use fbsde_core::forward::{
    apriori_check, apriori_stability, decay_diagnostic, equivalent_sq_distance, euler_solve, picard_solve,
    FnCoefficients, ForwardConstants, ForwardSpec, InitialState,
};
use fbsde_core::lqgame::*;
use fbsde_core::paths::PathSet;
use fbsde_core::timegrid::{l2h_norm, weighted_l2k_norm, Hurst, TimeGrid};
use fbsde_lab::builtins;
use fbsde_lab::run::run_scenario;
use fbsde_lab::scenario::Overrides;
use nalgebra::DVector;

fn two_state() -> GeneratorMatrix<f64> {
    GeneratorMatrix::new(&[vec![-0.5, 0.5], vec![0.5, -0.5]]).unwrap()
}

fn bundle(t_end: f64, n_steps: usize, n_paths: usize, hurst: f64, q: GeneratorMatrix<f64>, seed: u64) -> Result<DriverBundle<f64>> {
    Ok(DriverBundle::simulate(&DriverConfig {
        grid: TimeGrid::new(0.0, t_end, n_steps)?,
        brownian_dim: 1,
        n_paths,
        hurst: Hurst::new(hurst)?,
        generator: q,
        initial_regime: 0,
        seed,
    })?)
}

type Verdict = Result<(bool, String)>;

fn fbm_law() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (i, h) in [0.6, 0.75, 0.9].into_iter().enumerate() {
        let b = bundle(2.0, 200, 10_000, h, GeneratorMatrix::trivial(), 100 + i as u64)?;
        for e in fbm_covariance_table(&b.fbm, &[0.5, 1.0, 2.0])? {
            worst = worst.max(e.z_score());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst < 5.0 && secs < 30.0, format!("max |z| = {worst:.2} over 18 entries, {secs:.1}s")))
}

fn kernel_identity() -> Verdict {
    let hurst = Hurst::new(0.75)?;
    let grid = TimeGrid::new(0.0, 2.0, 2000)?;
    let mut worst: f64 = 0.0;
    for t in [1.0, 2.0] {
        let f: Vec<f64> = grid.nodes().iter().map(|s| if *s <= t + 1e-12 { 1.0 } else { 0.0 }).collect();
        let v = l2h_norm(&f, hurst, &grid)?;
        let exact = f64::powf(t, 1.5);
        worst = worst.max((v / exact - 1.0).abs());
    }
    Ok((worst < 0.01, format!("max relative error {worst:.2e}")))
}

fn residual(c: &FnCoefficients<f64>, q: &GeneratorMatrix<f64>, tf: &FnTestFunction<f64>, n: usize, seed: u64) -> Result<ResidualStats<f64>> {
    let b = bundle(1.0, n, 10_000, 0.75, q.clone(), seed)?;
    let spec = ForwardSpec {
        coefficients: c,
        initial: InitialState::Fixed(vec![0.0]),
        constants: ForwardConstants::new(0.0, 0.0, 0.0, 0.0)?,
    };
    let sol = euler_solve(&spec, &b)?;
    let gi = GeneratorInputs { coefficients: c, generator: q, hurst: Hurst::new(0.75)?, grid: b.grid };
    Ok(ito_residual(tf, &gi, &b, &sol, (0.0, 1.0))?)
}

fn ito_formula() -> Verdict {
    let start = Instant::now();
    let trivial = GeneratorMatrix::trivial();
    let bm = FnCoefficients::<f64>::scalar(|_, _, _| 0.0, |_, _, _| 1.0, |_| 0.0);
    let fbm = FnCoefficients::<f64>::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 1.0);
    let none = FnCoefficients::<f64>::scalar(|_, _, _| 0.0, |_, _, _| 0.0, |_| 0.0);
    let chain = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]])?;
    let sq = FnTestFunction::square_norm();
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, c, q, tf, min_order) in [
        ("bm", &bm, &trivial, &sq, Some(0.8)),
        ("fbm", &fbm, &trivial, &sq, Some(0.5)),
        ("chain", &none, &chain, &FnTestFunction::regime_label(), None),
    ] {
        let s = residual(c, q, tf, 100, 3)?;
        let centred = s.within(5.0) || s.rms < 1e-10;
        ok &= centred;
        let z = if s.std_error > 0.0 { s.mean.abs() / s.std_error } else { 0.0 };
        let mut line = format!("{name}: |mean|/se = {z:.2}, rms {:.1e}", s.rms);
        if let Some(min) = min_order {
            let mut dts = Vec::new();
            let mut ms = Vec::new();
            for n in [50, 100, 200, 400] {
                let r = residual(c, q, tf, n, 17)?;
                dts.push(1.0 / n as f64);
                ms.push(r.rms * r.rms);
            }
            let order = fit_order(&dts, &ms)?;
            ok &= order >= min;
            line += &format!(", order {order:.2} (need {min})");
        }
        detail.push(line);
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    Ok((ok, format!("{}; {secs:.1}s", detail.join("; "))))
}

fn picard() -> Verdict {
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -x, |_, _, _| 0.0, |_| 0.0);
    let b = bundle(1.0, 200, 200, 0.7, two_state(), 5)?;
    let spec = ForwardSpec {
        coefficients: &c,
        initial: InitialState::Fixed(vec![1.0]),
        constants: ForwardConstants::new(1.0, 1.0, 0.0, 0.0)?,
    };
    let (sol, rep) = picard_solve(&spec, &b, 1.0, 16.0, 1e-3, 50)?;
    let worst = rep.ratios.iter().cloned().fold(0.0, f64::max);
    let euler = euler_solve(&spec, &b)?;
    let d = equivalent_sq_distance(&sol.x, &euler.x, 16.0, &b.grid)?.sqrt();
    Ok((
        rep.converged && worst <= 0.30 && d < 1e-3,
        format!("factor {:.3}, max ratio {worst:.3}, distance to Euler {d:.2e}", rep.factor),
    ))
}

fn ou_solution() -> Result<(DriverBundle<f64>, fbsde_core::forward::PathSolution<f64>)> {
    let b = bundle(5.0, 500, 10_000, 0.7, two_state(), 8)?;
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -2.0 * x, |_, _, _| 1.0, |_| 0.0);
    let spec = ForwardSpec {
        coefficients: &c,
        initial: InitialState::Fixed(vec![0.0]),
        constants: ForwardConstants::new(2.0, 2.0, 0.0, -1.0)?,
    };
    let sol = euler_solve(&spec, &b)?;
    Ok((b, sol))
}

fn decay() -> Verdict {
    let (b, sol) = ou_solution()?;
    let rep = decay_diagnostic(&sol, -1.0)?;
    let at5 = *rep.curve.last().unwrap();
    let from = b.grid.node_index(1.0).unwrap();
    let monotone = (from + 1..rep.curve.len()).all(|k| rep.curve[k] < rep.curve[k - 1]);
    let grow = decay_diagnostic(&sol, 3.0)?;
    Ok((
        at5 < 1e-4 && monotone && rep.decaying && !grow.decaying,
        format!("moment at u=5 {at5:.3e}, monotone past 1: {monotone}, K=3 divergent: {}", !grow.decaying),
    ))
}

fn apriori() -> Verdict {
    let (b, sol) = ou_solution()?;
    let c = FnCoefficients::<f64>::scalar(|_, x, _| -2.0 * x, |_, _, _| 1.0, |_| 0.0);
    let spec = ForwardSpec {
        coefficients: &c,
        initial: InitialState::Fixed(vec![0.0]),
        constants: ForwardConstants::new(2.0, 2.0, 0.0, -1.0)?,
    };
    let xe1 = apriori_check(&spec, &sol, &b, 0.5)?;
    let xe2 = apriori_stability(&spec, &sol, &spec, &sol, &b, 0.5)?;

    let bb = bundle(4.0, 400, 100, 0.7, two_state(), 6)?;
    let g = FnDriver::<f64>::scalar(|t: f64, _, _| (-t).exp());
    let mut bs = BackwardSpec { driver: &g, constants: BackwardConstants::with_k(1.0), features: None };
    bs.constants.l_mono = 0.25;
    let ysol = solve_truncated(&bs, &bb, 4.0)?;
    let ye1 = bsde_estimate_check(&bs, &ysol, &bb, 0.5)?;
    let ye2 = bsde_stability_check(&bs, &ysol, &bs, &ysol, &bb, 0.5)?;
    Ok((
        xe1.pass && xe1.margin > 0.0 && ye1.pass && ye1.margin > 0.0 && xe2.lhs == 0.0 && ye2.lhs == 0.0,
        format!(
            "forward margin {:.3e}, backward margin {:.3e}, stability lhs {} / {}",
            xe1.margin, ye1.margin, xe2.lhs, ye2.lhs
        ),
    ))
}

fn truncation() -> Verdict {
    let b = bundle(8.0, 800, 100, 0.7, two_state(), 4)?;
    let g = FnDriver::<f64>::scalar(|t: f64, _, _| (-t).exp());
    let spec = BackwardSpec { driver: &g, constants: BackwardConstants::with_k(0.1), features: None };
    let (sol, rep) = solve_infinite(&spec, &b, 1e-12, &[4.0, 6.0, 8.0])?;
    let y0 = sol.y.get(0, 0, 0);
    let ratio = rep.distances[1] / rep.distances[0];
    let target = (-2.0f64).exp();
    let decreasing = rep.distances[1] < rep.distances[0];
    Ok((
        (y0 + 1.0).abs() <= 0.02 && decreasing && (ratio / target - 1.0).abs() <= 0.5,
        format!("y(0) = {y0:.4}, distances {:.3e} -> {:.3e}, ratio {ratio:.4} vs {target:.4}", rep.distances[0], rep.distances[1]),
    ))
}

fn delta_rule(trace: &ContinuationTrace) -> bool {
    let steps = &trace.steps;
    (1..steps.len()).all(|j| {
        let (prev, st) = (&steps[j - 1], &steps[j]);
        st.delta <= 1.0 - prev.tau + 1e-12
            && (j < 2 || st.delta <= 2.0 * prev.delta + 1e-12)
            && (st.c5_hat <= 0.0 || st.delta * st.c5_hat.sqrt() <= 1.0 + 1e-9)
    })
}

fn continuation() -> Verdict {
    let opts = ContinuationOptions::new(1e-4, 40, 11);
    let two_regime = FnCoupled::<f64>::scalar(
        |y, i| if i == 0 { -2.0 * y + y.sin() } else { 3.0 * y - y.sin() },
        |_, th, i| if i == 0 { -2.0 * th.y[0] + th.y[0].sin() } else { 3.0 * th.y[0] - th.y[0].sin() },
        |_, th, i| if i == 0 { -2.0 * th.z[0] + th.z[0].sin() } else { th.z[0] + th.z[0].sin() },
        |_, th, i| {
            let x = th.x[0];
            if i == 0 { -2.0 * x + x.sin() + th.y[0] } else { 0.5 * x - x.sin() + th.y[0] }
        },
        |_| 0.0,
    );
    let spec = |c| FbsdeSpec {
        coefficients: c,
        kappa_x: 0.0,
        kappa_y: -1.0,
        k: -0.5,
        lipschitz: LipschitzTable::default(),
        gamma_mode: GammaHomotopy::Scaled,
    };
    let b = bundle(4.0, 80, 400, 0.7, two_state(), 2)?;
    let s2r = spec(&two_regime);
    let (_, plain) = solve_fbsde(&s2r, &b, &opts)?;
    let mut forcing = Forcing::zeros(&b.grid, 400, 1, 1);
    forcing.xi.data_mut().iter_mut().for_each(|v| *v = 0.5);
    let (_, forced) = solve_fbsde_forced(&s2r, &forcing, &b, &opts)?;
    let reached = plain.taus().last() == Some(&1.0) && forced.taus().last() == Some(&1.0);
    let residual = plain.final_residual.max(forced.final_residual);
    let rule = delta_rule(&plain) && delta_rule(&forced);

    let lin = FnCoupled::<f64>::scalar(
        |_, _| 0.0,
        |t, th, _| -th.x[0] + t.sin(),
        |_, _, _| 0.3,
        |t, th, _| th.y[0] + (-t).exp(),
        |_| 0.2,
    );
    let sl = FbsdeSpec { kappa_x: 1.0, k: 0.0, ..spec(&lin) };
    let bl = bundle(4.0, 80, 400, 0.7, two_state(), 4)?;
    let (th, lt) = solve_fbsde(&sl, &bl, &opts)?;
    let fc = FnCoefficients::<f64>::scalar(|t, x, _| -x + t.sin(), |_, _, _| 0.3, |_| 0.2);
    let fs = ForwardSpec {
        coefficients: &fc,
        initial: InitialState::Fixed(vec![0.0]),
        constants: ForwardConstants::new(1.0, 1.0, 0.0, 0.0)?,
    };
    let x = euler_solve(&fs, &bl)?.x;
    let g = FnDriver::<f64>::scalar(|t, y, _| y + (-t).exp());
    let levels = bl.driver_levels();
    let bs = BackwardSpec { driver: &g, constants: BackwardConstants::with_k(0.0), features: Some(&levels) };
    let y = solve_backward(&bs, &bl)?;
    let oracle = Theta { grid: bl.grid, x, y: y.y, z: y.z, r: y.r, f: y.f };
    let d = theta_sq_distance(&th, &oracle, 0.0)?.sqrt();
    let ok = reached && residual < 1e-3 && rule && delta_rule(&lt) && d < 1e-3;
    Ok((
        ok,
        format!(
            "tau=1 reached: {reached}, residual {residual:.2e}, {} + {} steps, delta rule: {rule}, oracle distance {d:.2e}",
            plain.steps.len(),
            forced.steps.len()
        ),
    ))
}

fn zero_sum_example() -> LqProblem<f64> {
    let mut p = LqProblem::zeros(1, 1, 1, 1, -0.25);
    p.b1 = scalar_const(1.0);
    p.b2 = scalar_const(1.0);
    p.d1 = vec![scalar_const(1.0)];
    p.d2 = vec![scalar_const(1.0)];
    p.gamma_fbm = constant_vector(DVector::from_element(1, 1.0));
    p.x0 = DVector::from_element(1, 0.5);
    p
}

fn game_opts(policy: AssumptionPolicy) -> GameOptions<f64> {
    let mut o = GameOptions::new(1e-4, 40, 3);
    o.policy = policy;
    o
}

fn game_saddle() -> Verdict {
    let b = bundle(4.0, 40, 10_000, 0.7, two_state(), 5)?;
    let p = zero_sum_example();
    let sol = solve_game(&p, &b, &game_opts(AssumptionPolicy::Enforce))?;
    let v = sol.value;
    let zero = sol.u1_norm < 1e-2 && sol.u2_norm < 1e-2 && v.value.abs() <= 3.0 * v.std_error + 1e-12;
    let rep = saddle_check(&p, &sol, 20, &[0.05, 0.1, 0.2], 9, &b)?;
    Ok((
        zero && rep.passed() && rep.violations == 0,
        format!(
            "|u1| {:.1e}, |u2| {:.1e}, J* {:.2e} (se {:.1e}), {} perturbations, {} violations",
            sol.u1_norm,
            sol.u2_norm,
            v.value,
            v.std_error,
            rep.entries.len(),
            rep.violations
        ),
    ))
}

fn stationarity_and_cross_term() -> Verdict {
    let b6 = bundle(4.0, 40, 10_000, 0.7, two_state(), 5)?;
    let sol6 = solve_game(&zero_sum_example(), &b6, &game_opts(AssumptionPolicy::Enforce))?;

    let b = bundle(4.0, 80, 400, 0.7, two_state(), 10)?;
    let mut p = LqProblem::zeros(1, 1, 1, 1, -0.25);
    p.a = scalar_const(-1.0);
    p.b1 = scalar_const(0.3);
    p.b2 = scalar_const(0.2);
    p.c = vec![scalar_const(0.2)];
    p.gamma_fbm = constant_vector(DVector::from_element(1, 0.3));
    p.q = scalar_const(0.5);
    p.s1 = scalar_const(0.2);
    p.s2 = scalar_const(0.1);
    p.x0 = DVector::from_element(1, 1.0);
    let opts = game_opts(AssumptionPolicy::ReportOnly);
    let direct = solve_game(&p, &b, &opts)?;
    let probes = probe_set(&b.grid, b.m());
    let (t, map) = cross_term_reduce(&p, &probes)?;
    let reduced = solve_game(&t, &b, &opts)?;
    let (u1, u2) = map.from_tilde(&reduced.u1, &reduced.u2, &reduced.theta.x, &b)?;
    let d1 = weighted_l2k_norm(&u1.difference(&direct.u1)?, p.k, &b.grid)?.value;
    let d2 = weighted_l2k_norm(&u2.difference(&direct.u2)?, p.k, &b.grid)?.value;

    let v1 = PathSet::deterministic(b.n_paths(), &b.grid, 1, |s| vec![(-s).exp()]);
    let v2 = PathSet::deterministic(b.n_paths(), &b.grid, 1, |s| vec![0.5 * (2.0 * s).sin() * (-s).exp()]);
    let x = simulate_controlled_state(&p, &v1, &v2, &b)?;
    let (w1, w2) = map.to_tilde(&v1, &v2, &x, &b)?;
    let j = evaluate_cost(&p, &v1, &v2, &b)?;
    let jt = evaluate_cost(&t, &w1, &w2, &b)?;
    let gap = (j.value - jt.value).abs();
    let ok = sol6.stationarity < 1e-6
        && direct.stationarity < 1e-6
        && d1 < 1e-3
        && d2 < 1e-3
        && gap <= 3.0 * j.std_error + 1e-9;
    Ok((
        ok,
        format!(
            "stationarity {:.1e} / {:.1e}, round trip {d1:.1e} / {d2:.1e}, cost gap {gap:.1e} (se {:.1e})",
            sol6.stationarity, direct.stationarity, j.std_error
        ),
    ))
}

fn determinism() -> Verdict {
    let o = Overrides { paths: Some(200), steps: Some(40), ..Overrides::default() };
    let mut differing = Vec::new();
    let mut n = 0;
    for name in builtins::names() {
        let s = builtins::load(name)?.with_overrides(&o)?;
        let a = run_scenario(&s)?.summary_json();
        let b = run_scenario(&s)?.summary_json();
        n += 1;
        if a != b {
            differing.push(name);
        }
    }
    Ok((differing.is_empty(), format!("{n} builtins rerun, differing summaries: {differing:?}")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("fBm covariance law", fbm_law),
        ("kernel identity", kernel_identity),
        ("extended Ito formula", ito_formula),
        ("Picard contraction", picard),
        ("weighted decay", decay),
        ("a-priori estimates", apriori),
        ("BSDE truncation", truncation),
        ("continuation", continuation),
        ("game saddle", game_saddle),
        ("stationarity and cross term", stationarity_and_cross_term),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {title}: {detail} [{:.1}s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
