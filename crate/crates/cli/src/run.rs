//! One pipeline per target.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use fbsde_core::backward::{
    bsde_estimate_check, bsde_stability_check, solve_infinite, solve_truncated, BackwardConstants, BackwardSpec, FnDriver,
};
use fbsde_core::calculus::{fit_order, ito_residual, FnTestFunction, GeneratorInputs, ResidualStats};
use fbsde_core::coupled::{
    solve_fbsde_forced, theta_sq_distance, ContinuationOptions, FbsdeSpec, FnCoupled, Forcing, GammaHomotopy,
    LipschitzTable, Theta, ThetaPoint,
};
use fbsde_core::drivers::{fbm_covariance_table, DriverBundle, DriverConfig};
use fbsde_core::forward::{
    apriori_check, apriori_stability, decay_diagnostic, equivalent_sq_distance, euler_solve, picard_solve,
    FnCoefficients, ForwardConstants, ForwardSpec, InitialState, Site,
};
use fbsde_core::lqgame::{
    cross_term_reduce, evaluate_cost, probe_set, saddle_check, simulate_controlled_state, solve_game,
    stationarity_field, stationarity_residual, AssumptionPolicy, Candidate, GameOptions, LqProblem, MatrixFn,
    VectorFn,
};
use fbsde_core::paths::PathSet;
use fbsde_core::timegrid::{weighted_l2k_norm, TimeGrid};
use nalgebra::DVector;
use serde_json::{json, Map, Value};

use crate::expr::Env;
use crate::params::*;
use crate::report::{Artifact, Report};
use crate::scenario::{Coef, Scenario, Setup, Target};

/// Runs every case of the scenario in order.
pub fn run_scenario(s: &Scenario) -> Result<Report> {
    let start = Instant::now();
    let seed = s.setups.first().map_or(0, |x| x.seed);
    let mut report = Report::new(&s.name, s.target, seed);
    for setup in &s.setups {
        let mut sink = Sink::default();
        let ctx = || match &setup.label {
            Some(l) => format!("scenario `{}`, case `{l}`", s.name),
            None => format!("scenario `{}`", s.name),
        };
        match s.target {
            Target::Drivers => drivers(setup, &mut sink),
            Target::Calculus => calculus(setup, &mut sink),
            Target::Forward => forward(setup, &mut sink),
            Target::Backward => backward(setup, &mut sink),
            Target::Coupled => coupled(setup, &mut sink),
            Target::Lqgame => lqgame(setup, &mut sink),
        }
        .with_context(ctx)?;
        for c in &setup.checks {
            if !sink.checks.contains_key(c) {
                bail!("{}: check `{c}` produced no verdict", ctx());
            }
        }
        match &setup.label {
            Some(l) => {
                report.results.insert(l.clone(), Value::Object(sink.results));
                for (k, v) in sink.checks {
                    report.checks.insert(format!("{l}.{k}"), v);
                }
            }
            None => {
                report.results.extend(sink.results);
                report.checks.extend(sink.checks);
            }
        }
        for (k, v) in sink.artifacts {
            report.artifacts.insert(setup.key(&k), v);
        }
    }
    report.wall_time = start.elapsed();
    Ok(report)
}

#[derive(Default)]
struct Sink {
    results: Map<String, Value>,
    checks: BTreeMap<String, bool>,
    artifacts: BTreeMap<String, Artifact>,
}

impl Sink {
    fn put(&mut self, key: &str, v: impl Into<Value>) {
        self.results.insert(key.to_string(), v.into());
    }

    fn check(&mut self, s: &Setup, name: &str, ok: bool) {
        if s.wants(name) {
            self.checks.insert(name.to_string(), ok);
        }
    }
}

fn need<T>(v: Option<T>, check: &str, what: &str) -> Result<T> {
    v.ok_or_else(|| anyhow!("check `{check}` needs {what}"))
}

fn bundle_on(s: &Setup, grid: TimeGrid<f64>, n_paths: usize) -> Result<DriverBundle<f64>> {
    Ok(DriverBundle::simulate(&DriverConfig {
        grid,
        brownian_dim: s.brownian_dim,
        n_paths,
        hurst: s.hurst,
        generator: s.generator.clone(),
        initial_regime: s.initial_regime,
        seed: s.seed,
    })?)
}

fn bundle(s: &Setup) -> Result<DriverBundle<f64>> {
    bundle_on(s, s.grid, s.n_paths)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn z_of(mean: f64, exact: f64, se: f64) -> f64 {
    if se > 0.0 {
        (mean - exact).abs() / se
    } else if mean == exact {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `time,path_id,<columns>` for the first `cap` paths.
fn paths_table(grid: &TimeGrid<f64>, cap: usize, sets: &[(&str, &PathSet<f64>)]) -> Artifact {
    let mut columns = vec!["time".to_string(), "path_id".to_string()];
    for (name, set) in sets {
        if set.dim() == 1 {
            columns.push(name.to_string());
        } else {
            columns.extend((1..=set.dim()).map(|i| format!("{name}_{i}")));
        }
    }
    let n_paths = sets.first().map_or(0, |(_, s)| s.n_paths()).min(cap);
    let mut rows = Vec::new();
    for p in 0..n_paths {
        for k in 0..grid.n_nodes() {
            let mut row = vec![grid.node(k), p as f64];
            for (_, set) in sets {
                row.extend_from_slice(set.at(p, k));
            }
            rows.push(row);
        }
    }
    Artifact::Table { columns, rows }
}

fn series(xs: &[f64]) -> Value {
    json!(xs)
}

fn drivers(s: &Setup, out: &mut Sink) -> Result<()> {
    let p: DriversParams = s.params()?;
    let b = bundle(s)?;
    let nodes = if p.nodes.is_empty() { vec![s.grid.t_end()] } else { p.nodes.clone() };
    let table = fbm_covariance_table(&b.fbm, &nodes)?;
    let max_z = table.iter().map(|e| e.z_score()).fold(0.0, f64::max);
    out.put("fbm_covariance", serde_json::to_value(&table)?);
    out.put("fbm_max_z", max_z);
    out.artifacts.insert(
        "covariance".into(),
        Artifact::Table {
            columns: ["t", "u", "empirical", "exact", "std_error", "z"].map(String::from).to_vec(),
            rows: table.iter().map(|e| vec![e.t, e.u, e.empirical, e.exact, e.std_error, e.z_score()]).collect(),
        },
    );
    out.check(s, "fbm_covariance", max_z < p.z);

    let n_steps = s.grid.n_steps();
    let span = s.grid.span();
    let mut bz: f64 = 0.0;
    for c in 0..b.brownian_dim() {
        let sq: Vec<f64> = (0..b.n_paths())
            .map(|q| {
                let w: f64 = (0..n_steps).map(|k| b.dw(q, k)[c]).sum();
                w * w
            })
            .collect();
        let (m, se) = mean_se(&sq);
        bz = bz.max(z_of(m, span, se));
    }
    out.put("brownian_max_z", bz);
    out.check(s, "brownian_variance", bz < p.z);

    let mut mz: f64 = 0.0;
    for idx in 0..b.n_pairs() {
        let tot: Vec<f64> = (0..b.n_paths()).map(|q| (0..n_steps).map(|k| b.dm(q, k)[idx]).sum()).collect();
        let (m, se) = mean_se(&tot);
        mz = mz.max(z_of(m, 0.0, se));
    }
    out.put("martingale_max_z", mz);
    out.check(s, "martingale_mean", mz < p.z);
    Ok(())
}

fn sde_coefficients<'a>(s: &Setup, suffix: &str) -> FnCoefficients<'a, f64> {
    let pick = |name: &str| {
        let bar = format!("{name}{suffix}");
        if s.has(&bar) {
            s.coef(&bar)
        } else {
            s.coef(name)
        }
    };
    let (b, sigma, gamma) = (pick("b"), pick("sigma"), pick("gamma"));
    FnCoefficients::new(
        1,
        1,
        move |site: &Site<f64>, x: &[f64], o: &mut [f64]| {
            o[0] = b.scalar(&Env { t: site.t, x: x[0], regime: site.regime, ..Env::default() })
        },
        move |site: &Site<f64>, x: &[f64], o: &mut [f64]| {
            o[0] = sigma.scalar(&Env { t: site.t, x: x[0], regime: site.regime, ..Env::default() })
        },
        move |t: f64, o: &mut [f64]| o[0] = gamma.scalar(&Env::at(t, 0)),
    )
}

fn calculus(s: &Setup, out: &mut Sink) -> Result<()> {
    let p: CalculusParams = s.params()?;
    let c = sde_coefficients(s, "");
    let tf = match p.test_function {
        TestFn::Square => FnTestFunction::square_norm(),
        TestFn::Identity => FnTestFunction::identity(),
        TestFn::RegimeLabel => FnTestFunction::regime_label(),
    };
    let window = p.window.map_or((s.grid.t0(), s.grid.t_end()), |w| (w[0], w[1]));
    let level = |n_steps: usize, n_paths: usize| -> Result<ResidualStats<f64>> {
        let grid = TimeGrid::new(s.grid.t0(), s.grid.t_end(), n_steps)?;
        let b = bundle_on(s, grid, n_paths)?;
        let spec = ForwardSpec {
            coefficients: &c,
            initial: InitialState::Fixed(vec![0.0]),
            constants: ForwardConstants::new(0.0, 0.0, 0.0, 0.0)?,
        };
        let sol = euler_solve(&spec, &b)?;
        let gi = GeneratorInputs { coefficients: &c, generator: &s.generator, hurst: s.hurst, grid };
        Ok(ito_residual(&tf, &gi, &b, &sol, window)?)
    };
    let base = level(s.grid.n_steps(), s.n_paths)?;
    out.put("mean", base.mean);
    out.put("std_error", base.std_error);
    out.put("rms", base.rms);
    out.put("n_paths", base.n_paths);
    out.check(s, "centred", base.within(p.z) || base.rms < 1e-10);
    let mut rows = vec![vec![s.grid.n_steps() as f64, s.grid.dt(), base.mean, base.std_error, base.rms]];
    if !p.refinements.is_empty() {
        let n_paths = p.refinement_paths.unwrap_or(s.n_paths);
        let mut dts = Vec::new();
        let mut ms = Vec::new();
        for &n in &p.refinements {
            let st = level(n, n_paths)?;
            let dt = s.grid.span() / n as f64;
            rows.push(vec![n as f64, dt, st.mean, st.std_error, st.rms]);
            dts.push(dt);
            ms.push(st.rms * st.rms);
        }
        let order = fit_order(&dts, &ms)?;
        out.put("order", order);
        if s.wants("order") {
            let min = need(p.min_order, "order", "params.min_order")?;
            out.check(s, "order", order >= min);
        }
    } else if s.wants("order") {
        bail!("check `order` needs params.refinements");
    }
    out.artifacts.insert(
        "residual".into(),
        Artifact::Table { columns: ["n_steps", "dt", "mean", "std_error", "rms"].map(String::from).to_vec(), rows },
    );
    Ok(())
}

fn forward(s: &Setup, out: &mut Sink) -> Result<()> {
    let p: ForwardParams = s.params()?;
    let c = sde_coefficients(s, "");
    let x0 = s.coef("x0").scalar(&Env::default());
    let k = p.constants;
    let constants = ForwardConstants::new(k.kappa_x, k.l_bx, k.l_sigma_x, s.k)?;
    let spec = ForwardSpec { coefficients: &c, initial: InitialState::Fixed(vec![x0]), constants };
    let b = bundle(s)?;
    let sol = euler_solve(&spec, &b)?;
    let last = s.grid.n_steps();
    let xs: Vec<f64> = (0..b.n_paths()).map(|q| sol.x.get(q, last, 0)).collect();
    let (m, se) = mean_se(&xs);
    out.put("x_end_mean", m);
    out.put("x_end_std_error", se);
    out.artifacts.insert("paths".into(), paths_table(&s.grid, p.csv_paths, &[("x", &sol.x)]));

    if let Some(pc) = p.picard {
        let (psol, rep) = picard_solve(&spec, &b, s.grid.span(), pc.a, pc.tol, pc.max_iter)?;
        let dist = equivalent_sq_distance(&psol.x, &sol.x, pc.a, &s.grid)?.sqrt();
        let worst = rep.ratios.iter().cloned().fold(0.0, f64::max);
        out.put(
            "picard",
            json!({
                "factor": rep.factor,
                "ratios": rep.ratios,
                "max_ratio": worst,
                "iterations": rep.iterations,
                "converged": rep.converged,
                "distance_to_euler": dist,
            }),
        );
        out.check(s, "picard_contraction", rep.converged && worst <= pc.max_ratio && dist < pc.tol);
    } else if s.wants("picard_contraction") {
        bail!("check `picard_contraction` needs params.picard");
    }

    if let Some(dp) = p.decay {
        let rep = decay_diagnostic(&sol, s.k)?;
        let ku = s.grid.node_index(dp.u).ok_or_else(|| anyhow!("params.decay.u = {} is not a grid node", dp.u))?;
        let from = s.grid.index_at_or_before(dp.monotone_from);
        let monotone = (from + 1..rep.curve.len()).all(|j| rep.curve[j] < rep.curve[j - 1]);
        out.put(
            "decay",
            json!({ "value_at_u": rep.curve[ku], "tail_slope": rep.tail_slope, "decaying": rep.decaying, "monotone": monotone }),
        );
        out.check(s, "decay", rep.curve[ku] < dp.threshold && monotone && rep.decaying);
        out.artifacts.insert(
            "decay".into(),
            Artifact::Table {
                columns: vec!["time".into(), "weighted_moment".into()],
                rows: rep.curve.iter().enumerate().map(|(j, v)| vec![s.grid.node(j), *v]).collect(),
            },
        );
        if let Some(dk) = dp.divergent_k {
            let grow = decay_diagnostic(&sol, dk)?;
            out.put("divergent", json!({ "k": dk, "tail_slope": grow.tail_slope, "decaying": grow.decaying }));
            out.check(s, "divergent_k", !grow.decaying);
        } else if s.wants("divergent_k") {
            bail!("check `divergent_k` needs params.decay.divergent_k");
        }
    } else if s.wants("decay") || s.wants("divergent_k") {
        bail!("checks `decay` and `divergent_k` need params.decay");
    }

    if let Some(mu) = p.mu {
        let ap = apriori_check(&spec, &sol, &b, mu)?;
        out.put("apriori", json!({ "lhs": ap.lhs, "rhs": ap.rhs, "margin": ap.margin, "c_fbm": ap.c_fbm }));
        out.check(s, "apriori", ap.pass && ap.margin > 0.0);
        let identical = !["b_bar", "sigma_bar", "gamma_bar"].iter().any(|n| s.has(n));
        let cb = sde_coefficients(s, "_bar");
        let spec_bar = ForwardSpec { coefficients: &cb, initial: InitialState::Fixed(vec![x0]), constants };
        let sol_bar = if identical { sol.clone() } else { euler_solve(&spec_bar, &b)? };
        let st = apriori_stability(&spec, &sol, &spec_bar, &sol_bar, &b, mu)?;
        out.put("apriori_stability", json!({ "lhs": st.lhs, "rhs": st.rhs, "margin": st.margin }));
        out.check(s, "apriori_stability", st.pass && (!identical || st.lhs == 0.0));
    } else if s.wants("apriori") || s.wants("apriori_stability") {
        bail!("checks `apriori` and `apriori_stability` need params.mu");
    }
    Ok(())
}

fn driver_of<'a>(g: Coef) -> FnDriver<'a, f64> {
    FnDriver::new(1, move |site: &Site<f64>, y: &[f64], z: &[f64], r: &[f64], f: &[f64], o: &mut [f64]| {
        o[0] = g.scalar(&Env {
            t: site.t,
            y: y[0],
            z: z[0],
            r: r[0],
            f: f.first().copied().unwrap_or(0.0),
            regime: site.regime,
            ..Env::default()
        })
    })
}

fn backward(s: &Setup, out: &mut Sink) -> Result<()> {
    let p: BackwardParams = s.params()?;
    let b = bundle(s)?;
    let g = driver_of(s.coef("g"));
    let levels = b.driver_levels();
    let features = (p.features == Features::Drivers).then_some(&levels);
    let constants = BackwardConstants { l_mono: p.l_mono, ..BackwardConstants::with_k(s.k) };
    let spec = BackwardSpec { driver: &g, constants, features };
    let schedule = if p.schedule.is_empty() { vec![s.grid.t_end()] } else { p.schedule.clone() };
    let (sol, rep) = solve_infinite(&spec, &b, p.tol, &schedule)?;
    let y0s: Vec<f64> = (0..b.n_paths()).map(|q| sol.y.get(q, 0, 0)).collect();
    let (y0, y0_se) = mean_se(&y0s);
    let ratios: Vec<f64> = rep.distances.windows(2).map(|w| w[1] / w[0]).collect();
    out.put("y0", y0);
    out.put("y0_std_error", y0_se);
    out.put("levels", series(&rep.levels));
    out.put("distances", series(&rep.distances));
    out.put("ratios", series(&ratios));
    out.put("converged", rep.converged);
    if s.wants("y0") {
        let want = need(p.expected_y0, "y0", "params.expected_y0")?;
        let err = if want == 0.0 { y0.abs() } else { ((y0 - want) / want).abs() };
        out.check(s, "y0", err <= p.y0_rel_tol);
    }
    if s.wants("level_ratio") {
        let want = need(p.expected_ratio, "level_ratio", "params.expected_ratio")?;
        let ok = !ratios.is_empty() && ratios.iter().all(|r| *r < 1.0 && ((r / want) - 1.0).abs() <= p.ratio_rel_tol);
        out.check(s, "level_ratio", ok);
    }
    if s.wants("estimate") || s.wants("stability") {
        let mu = need(p.mu, "estimate", "params.mu")?;
        let est = bsde_estimate_check(&spec, &sol, &b, mu)?;
        out.put("estimate", json!({ "lhs": est.lhs, "rhs": est.rhs, "margin": est.margin, "c_fbm": est.c_fbm }));
        out.check(s, "estimate", est.pass && est.margin > 0.0);
        let identical = !s.has("g_bar");
        let gb = driver_of(s.coef("g_bar"));
        let spec_bar = BackwardSpec { driver: if identical { &g } else { &gb }, constants, features };
        let sol_bar = if identical { sol.clone() } else { solve_truncated(&spec_bar, &b, sol.level)? };
        let st = bsde_stability_check(&spec, &sol, &spec_bar, &sol_bar, &b, mu)?;
        out.put("stability", json!({ "lhs": st.lhs, "rhs": st.rhs, "margin": st.margin }));
        out.check(s, "stability", st.pass && (!identical || st.lhs == 0.0));
    }
    out.artifacts.insert(
        "paths".into(),
        paths_table(&s.grid, p.csv_paths, &[("y", &sol.y), ("z", &sol.z), ("r", &sol.r), ("f", &sol.f)]),
    );
    out.artifacts.insert(
        "levels".into(),
        Artifact::Table {
            columns: vec!["level".into(), "distance_to_previous".into()],
            rows: rep
                .levels
                .iter()
                .enumerate()
                .map(|(i, l)| vec![*l, if i == 0 { f64::NAN } else { rep.distances[i - 1] }])
                .collect(),
        },
    );
    Ok(())
}

fn theta_env(site: &Site<f64>, th: &ThetaPoint<f64>) -> Env {
    Env {
        t: site.t,
        x: th.x[0],
        y: th.y[0],
        z: th.z[0],
        r: th.r[0],
        f: th.f.first().copied().unwrap_or(0.0),
        regime: site.regime,
    }
}

fn coupled(s: &Setup, out: &mut Sink) -> Result<()> {
    let p: CoupledParams = s.params()?;
    let (psi, bc, sc, gc, gam) = (s.coef("psi"), s.coef("b"), s.coef("sigma"), s.coef("g"), s.coef("gamma"));
    let c = {
        let (psi, bc, sc, gc, gam) = (psi.clone(), bc.clone(), sc.clone(), gc.clone(), gam.clone());
        FnCoupled::new(
            1,
            1,
            move |y: &[f64], i: usize, o: &mut [f64]| o[0] = psi.scalar(&Env { y: y[0], regime: i, ..Env::default() }),
            move |st: &Site<f64>, th: &ThetaPoint<f64>, o: &mut [f64]| o[0] = bc.scalar(&theta_env(st, th)),
            move |st: &Site<f64>, th: &ThetaPoint<f64>, o: &mut [f64]| o[0] = sc.scalar(&theta_env(st, th)),
            move |st: &Site<f64>, th: &ThetaPoint<f64>, o: &mut [f64]| o[0] = gc.scalar(&theta_env(st, th)),
            move |t: f64, o: &mut [f64]| o[0] = gam.scalar(&Env::at(t, 0)),
        )
    };
    let gamma_mode = match p.gamma_mode {
        GammaMode::Scaled => GammaHomotopy::Scaled,
        GammaMode::Fixed => GammaHomotopy::Fixed,
    };
    let spec = FbsdeSpec {
        coefficients: &c,
        kappa_x: p.kappa_x,
        kappa_y: p.kappa_y,
        k: s.k,
        lipschitz: LipschitzTable { psi: [0.0; 5], g: [0.0; 5], b: [0.0; 5], sigma: [0.0; 5] },
        gamma_mode,
    };
    let b = bundle(s)?;
    let x0 = s.coef("x0").scalar(&Env::default());
    let mut forcing = Forcing::zeros(&s.grid, b.n_paths(), 1, 1);
    forcing.xi.data_mut().iter_mut().for_each(|v| *v = x0);
    let opts = ContinuationOptions::new(p.tol, p.max_iter, s.seed);
    let (th, trace) = solve_fbsde_forced(&spec, &forcing, &b, &opts)?;
    let taus = trace.taus();
    let kc = spec.k_conditions();
    out.put("taus", series(&taus));
    out.put("deltas", series(&trace.steps.iter().map(|t| t.delta).collect::<Vec<_>>()));
    out.put("rejected_steps", trace.rejected.len());
    out.put("final_residual", trace.final_residual);
    out.put("k_conditions", serde_json::to_value(kc)?);
    let y0s: Vec<f64> = (0..b.n_paths()).map(|q| th.y.get(q, 0, 0)).collect();
    out.put("y0", mean_se(&y0s).0);
    out.check(s, "reaches_one", taus.last() == Some(&1.0));
    out.check(s, "residual", trace.final_residual < p.residual_tol);
    let mut rule = true;
    for (j, st) in trace.steps.iter().enumerate().skip(1) {
        let prev = &trace.steps[j - 1];
        rule &= st.delta <= 1.0 - prev.tau + 1e-12;
        if j >= 2 {
            rule &= st.delta <= 2.0 * prev.delta + 1e-12;
        }
        if st.c5_hat > 0.0 {
            rule &= st.delta * st.c5_hat.sqrt() <= 1.0 + 1e-9;
        }
    }
    out.check(s, "delta_rule", rule);
    out.put("trace", serde_json::to_value(&trace)?);

    if s.wants("sequential_oracle") {
        let fc = {
            let (bc, sc, gam) = (bc.clone(), sc.clone(), gam.clone());
            FnCoefficients::new(
                1,
                1,
                move |st: &Site<f64>, x: &[f64], o: &mut [f64]| {
                    o[0] = bc.scalar(&Env { t: st.t, x: x[0], regime: st.regime, ..Env::default() })
                },
                move |st: &Site<f64>, x: &[f64], o: &mut [f64]| {
                    o[0] = sc.scalar(&Env { t: st.t, x: x[0], regime: st.regime, ..Env::default() })
                },
                move |t: f64, o: &mut [f64]| o[0] = gam.scalar(&Env::at(t, 0)),
            )
        };
        let start = x0 + psi.scalar(&Env { regime: s.initial_regime, ..Env::default() });
        let fs = ForwardSpec {
            coefficients: &fc,
            initial: InitialState::Fixed(vec![start]),
            constants: ForwardConstants::new(0.0, 0.0, 0.0, s.k)?,
        };
        let x = euler_solve(&fs, &b)?.x;
        let xr = &x;
        let gcl = gc.clone();
        let drv = FnDriver::new(1, move |st: &Site<f64>, y: &[f64], z: &[f64], r: &[f64], f: &[f64], o: &mut [f64]| {
            o[0] = gcl.scalar(&Env {
                t: st.t,
                x: xr.get(st.path, st.node, 0),
                y: y[0],
                z: z[0],
                r: r[0],
                f: f.first().copied().unwrap_or(0.0),
                regime: st.regime,
            })
        });
        let levels = b.driver_levels();
        let bs = BackwardSpec { driver: &drv, constants: BackwardConstants::with_k(s.k), features: Some(&levels) };
        let y = fbsde_core::backward::solve_backward(&bs, &b)?;
        let oracle = Theta { grid: b.grid, x: x.clone(), y: y.y, z: y.z, r: y.r, f: y.f };
        let d = theta_sq_distance(&th, &oracle, s.k)?.sqrt();
        out.put("oracle_distance", d);
        out.check(s, "sequential_oracle", d < p.oracle_tol);
    }
    out.artifacts.insert(
        "paths".into(),
        paths_table(&s.grid, p.csv_paths, &[("x", &th.x), ("y", &th.y), ("z", &th.z), ("r", &th.r), ("f", &th.f)]),
    );
    out.artifacts.insert(
        "trace".into(),
        Artifact::Table {
            columns: ["tau", "delta", "iterations", "distance", "c5_hat"].map(String::from).to_vec(),
            rows: trace
                .steps
                .iter()
                .map(|t| vec![t.tau, t.delta, t.iterations as f64, t.distance, t.c5_hat])
                .collect(),
        },
    );
    Ok(())
}

fn matrix_fn(s: &Setup, name: &str, rows: usize, cols: usize) -> Result<Option<MatrixFn<f64>>> {
    if !s.has(name) {
        return Ok(None);
    }
    let c = s.coef(name);
    let shape = c.shape().map_err(|e| anyhow!("coefficients.{name}: {e}"))?;
    if shape != (rows, cols) {
        bail!("coefficients.{name}: expected {rows}×{cols}, got {}×{}", shape.0, shape.1);
    }
    Ok(Some(Arc::new(move |t: f64, i: usize| c.matrix(&Env::at(t, i)))))
}

/// C, D₁, D₂: one matrix when d = 1, otherwise a list of d matrices.
fn matrix_list(s: &Setup, name: &str, rows: usize, cols: usize, d: usize) -> Result<Option<Vec<MatrixFn<f64>>>> {
    if !s.has(name) {
        return Ok(None);
    }
    if d == 1 {
        return Ok(matrix_fn(s, name, rows, cols)?.map(|f| vec![f]));
    }
    let Coef::List(items) = s.coef(name) else {
        bail!("coefficients.{name}: expected a list of {d} matrices");
    };
    if items.len() != d {
        bail!("coefficients.{name}: expected {d} matrices, got {}", items.len());
    }
    items
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let shape = c.shape().map_err(|e| anyhow!("coefficients.{name}[{i}]: {e}"))?;
            if shape != (rows, cols) {
                bail!("coefficients.{name}[{i}]: expected {rows}×{cols}, got {}×{}", shape.0, shape.1);
            }
            Ok(Arc::new(move |t: f64, r: usize| c.matrix(&Env::at(t, r))) as MatrixFn<f64>)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn vector_of(s: &Setup, name: &str, n: usize) -> Result<Option<Coef>> {
    if !s.has(name) {
        return Ok(None);
    }
    let c = s.coef(name);
    let shape = c.shape().map_err(|e| anyhow!("coefficients.{name}: {e}"))?;
    if shape != (n, 1) {
        bail!("coefficients.{name}: expected a vector of length {n}");
    }
    Ok(Some(c))
}

pub(crate) fn lq_problem(s: &Setup, p: &LqParams) -> Result<LqProblem<f64>> {
    let (n, m1, m2, d) = (p.n, p.m1, p.m2, s.brownian_dim);
    if n == 0 {
        bail!("params.n: state dimension must be positive");
    }
    let mut prob = LqProblem::zeros(n, m1, m2, d, s.k);
    let set = |slot: &mut MatrixFn<f64>, v: Option<MatrixFn<f64>>| {
        if let Some(f) = v {
            *slot = f;
        }
    };
    set(&mut prob.a, matrix_fn(s, "A", n, n)?);
    set(&mut prob.b1, matrix_fn(s, "B1", n, m1)?);
    set(&mut prob.b2, matrix_fn(s, "B2", n, m2)?);
    set(&mut prob.q, matrix_fn(s, "Q", n, n)?);
    set(&mut prob.s1, matrix_fn(s, "S1", m1, n)?);
    set(&mut prob.s2, matrix_fn(s, "S2", m2, n)?);
    set(&mut prob.r11, matrix_fn(s, "R11", m1, m1)?);
    set(&mut prob.r12, matrix_fn(s, "R12", m1, m2)?);
    set(&mut prob.r21, matrix_fn(s, "R21", m2, m1)?);
    set(&mut prob.r22, matrix_fn(s, "R22", m2, m2)?);
    if let Some(v) = matrix_list(s, "C", n, n, d)? {
        prob.c = v;
    }
    if let Some(v) = matrix_list(s, "D1", n, m1, d)? {
        prob.d1 = v;
    }
    if let Some(v) = matrix_list(s, "D2", n, m2, d)? {
        prob.d2 = v;
    }
    if let Some(g) = vector_of(s, "gamma_fbm", n)? {
        prob.gamma_fbm = Arc::new(move |t: f64| DVector::from_column_slice(g.matrix(&Env::at(t, 0)).as_slice())) as VectorFn<f64>;
    }
    if let Some(x0) = vector_of(s, "x0", n)? {
        prob.x0 = DVector::from_column_slice(x0.matrix(&Env::default()).as_slice());
    }
    Ok(prob)
}

fn per_node_mean_sq(set: &PathSet<f64>) -> Vec<f64> {
    (0..set.n_nodes())
        .map(|k| {
            (0..set.n_paths()).map(|p| set.at(p, k).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / set.n_paths() as f64
        })
        .collect()
}

fn lqgame(s: &Setup, out: &mut Sink) -> Result<()> {
    let p: LqParams = s.params()?;
    let prob = lq_problem(s, &p)?;
    let b = bundle(s)?;
    let mut opts = GameOptions::new(p.tol, p.max_iter, s.seed);
    opts.policy = match p.policy {
        Policy::Enforce => AssumptionPolicy::Enforce,
        Policy::ReportOnly => AssumptionPolicy::ReportOnly,
    };
    opts.gamma_mode = match p.gamma_mode {
        GammaMode::Scaled => GammaHomotopy::Scaled,
        GammaMode::Fixed => GammaHomotopy::Fixed,
    };
    let sol = solve_game(&prob, &b, &opts)?;
    let v = sol.value;
    out.put("value", v.value);
    out.put("value_std_error", v.std_error);
    out.put("horizon", v.horizon);
    out.put("tail_bound", v.tail_bound.map_or(Value::Null, Value::from));
    out.put("u1_norm", sol.u1_norm);
    out.put("u2_norm", sol.u2_norm);
    out.put("stationarity", sol.stationarity);
    out.put("kappa_x", sol.kappa_x + 0.0);
    out.put("k_max", sol.k_max + 0.0);
    out.put("zero_sum_pattern", sol.assumption_d.zero_sum_pattern);
    out.put("literal_r_pos", sol.assumption_d.literal_r_pos);
    out.put("k_conditions", serde_json::to_value(sol.k_conditions)?);
    out.put("taus", series(&sol.trace.taus()));
    out.put("final_residual", sol.trace.final_residual);
    out.check(
        s,
        "zero_saddle",
        sol.u1_norm < p.control_tol && sol.u2_norm < p.control_tol && v.value.abs() <= 3.0 * v.std_error + 1e-12,
    );
    out.check(s, "stationarity", sol.stationarity < p.stationarity_tol);

    let mut solution = json!({
        "value": serde_json::to_value(v)?,
        "u1_norm": sol.u1_norm,
        "u2_norm": sol.u2_norm,
        "stationarity": sol.stationarity,
        "kappa_x": sol.kappa_x + 0.0,
        "k_max": sol.k_max + 0.0,
        "K": s.k,
        "assumption_d": serde_json::to_value(&sol.assumption_d)?,
        "k_conditions": serde_json::to_value(sol.k_conditions)?,
        "trace": serde_json::to_value(&sol.trace)?,
    });

    let field = stationarity_field(&prob, &sol.candidate(), &b)?;
    let st = per_node_mean_sq(&field);
    let (m1, m2) = (p.m1, p.m2);
    let mut columns = vec!["time".to_string(), "mean_sq_stationarity".to_string()];
    columns.extend((1..=m1).map(|i| format!("mean_u1_{i}")));
    columns.extend((1..=m2).map(|i| format!("mean_u2_{i}")));
    let rows = (0..s.grid.n_nodes())
        .map(|k| {
            let mut row = vec![s.grid.node(k), st[k]];
            row.extend((0..m1).map(|c| sol.u1.mean_at(k, c)));
            row.extend((0..m2).map(|c| sol.u2.mean_at(k, c)));
            row
        })
        .collect();
    out.artifacts.insert("residual".into(), Artifact::Table { columns, rows });
    out.artifacts.insert(
        "paths".into(),
        paths_table(&s.grid, p.csv_paths, &[("x", &sol.theta.x), ("u1", &sol.u1), ("u2", &sol.u2)]),
    );

    if p.saddle.is_some() || s.wants("saddle") {
        let sp = p.saddle.clone().unwrap_or(SaddleParams { n_perturbations: 20, eps: vec![0.05, 0.1, 0.2] });
        let rep = saddle_check(&prob, &sol, sp.n_perturbations, &sp.eps, s.seed, &b)?;
        out.put("saddle_entries", rep.entries.len());
        out.put("saddle_violations", rep.violations);
        out.put("saddle_first_order_outside", rep.first_order_outside);
        out.put("saddle_second_order_wrong_sign", rep.second_order_wrong_sign);
        out.check(s, "saddle", rep.passed());
        out.artifacts.insert("saddle".into(), Artifact::Document(serde_json::to_value(&rep)?));
    }

    if p.cross_term || s.wants("cross_term_roundtrip") || s.wants("cost_identity") {
        let probes = probe_set(&s.grid, s.m());
        let (tp, map) = cross_term_reduce(&prob, &probes)?;
        let identity = map.is_identity(&probes);
        out.put("cross_term_identity_map", identity);
        let reduced = solve_game(&tp, &b, &opts)?;
        let (u1, u2) = map.from_tilde(&reduced.u1, &reduced.u2, &reduced.theta.x, &b)?;
        let cand = Candidate { u1: &u1, u2: &u2, x: &reduced.theta.x, y: &reduced.theta.y, z: &reduced.theta.z };
        let st_back = stationarity_residual(&prob, &cand, &b)?;
        let d1 = weighted_l2k_norm(&u1.difference(&sol.u1)?, s.k, &s.grid)?.value;
        let d2 = weighted_l2k_norm(&u2.difference(&sol.u2)?, s.k, &s.grid)?.value;
        out.put("roundtrip_u1_distance", d1);
        out.put("roundtrip_u2_distance", d2);
        out.put("roundtrip_stationarity", st_back);
        out.check(s, "cross_term_roundtrip", d1 < p.roundtrip_tol && d2 < p.roundtrip_tol);

        let probe = |dim: usize, f: fn(f64) -> f64| PathSet::deterministic(b.n_paths(), &s.grid, dim, |t| vec![f(t); dim]);
        let v1 = probe(m1, |t| (-t).exp());
        let v2 = probe(m2, |t| 0.5 * (2.0 * t).sin() * (-t).exp());
        let x = simulate_controlled_state(&prob, &v1, &v2, &b)?;
        let (w1, w2) = map.to_tilde(&v1, &v2, &x, &b)?;
        let j = evaluate_cost(&prob, &v1, &v2, &b)?;
        let jt = evaluate_cost(&tp, &w1, &w2, &b)?;
        out.put("cost_original", j.value);
        out.put("cost_reduced", jt.value);
        out.put("cost_std_error", j.std_error);
        out.check(s, "cost_identity", (j.value - jt.value).abs() <= 3.0 * j.std_error + 1e-9);
        solution["cross_term"] = json!({
            "identity_map": identity,
            "u1_distance": d1,
            "u2_distance": d2,
            "stationarity": st_back,
            "cost_original": j.value,
            "cost_reduced": jt.value,
        });
    }
    out.artifacts.insert("solution".into(), Artifact::Document(solution));
    Ok(())
}
