//! Fully coupled infinite-horizon FBSDE solved by continuation in τ from the
//! decoupled monotone system at τ = 0.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::backward::{solve_backward, BackwardConstants, BackwardSpec, FnDriver};
use crate::drivers::{normal, substream, DriverBundle, StreamTag};
use crate::error::{Error, Result, TraceStep};
use crate::forward::{euler_solve, FnCoefficients, ForwardConstants, ForwardSpec, InitialState, Site};
use crate::paths::PathSet;
use crate::scalar::Scalar;
use crate::timegrid::{weighted_sq_integral, TimeGrid};

/// θ = (x, y, z, r, f) at one site. `z` is `n × d` row-major, `f` is `n × P`.
#[derive(Clone, Copy, Debug)]
pub struct ThetaPoint<'a, T> {
    pub x: &'a [T],
    pub y: &'a [T],
    pub z: &'a [T],
    pub r: &'a [T],
    pub f: &'a [T],
}

/// Ψ, b, σ, g and the deterministic fBm integrand γ.
pub trait CoupledCoefficients<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn psi(&self, y: &[T], regime: usize, out: &mut [T]);
    fn b(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]);
    fn sigma(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]);
    fn g(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]);
    fn gamma(&self, t: T, out: &mut [T]);
}

type PsiFn<'a, T> = Box<dyn Fn(&[T], usize, &mut [T]) + Send + Sync + 'a>;
type ThetaFn<'a, T> = Box<dyn Fn(&Site<T>, &ThetaPoint<T>, &mut [T]) + Send + Sync + 'a>;
type GammaFn<'a, T> = Box<dyn Fn(T, &mut [T]) + Send + Sync + 'a>;

pub struct FnCoupled<'a, T> {
    dim: usize,
    noise_dim: usize,
    psi: PsiFn<'a, T>,
    b: ThetaFn<'a, T>,
    sigma: ThetaFn<'a, T>,
    g: ThetaFn<'a, T>,
    gamma: GammaFn<'a, T>,
}

impl<'a, T: Scalar> FnCoupled<'a, T> {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        psi: impl Fn(&[T], usize, &mut [T]) + Send + Sync + 'a,
        b: impl Fn(&Site<T>, &ThetaPoint<T>, &mut [T]) + Send + Sync + 'a,
        sigma: impl Fn(&Site<T>, &ThetaPoint<T>, &mut [T]) + Send + Sync + 'a,
        g: impl Fn(&Site<T>, &ThetaPoint<T>, &mut [T]) + Send + Sync + 'a,
        gamma: impl Fn(T, &mut [T]) + Send + Sync + 'a,
    ) -> Self {
        Self {
            dim,
            noise_dim,
            psi: Box::new(psi),
            b: Box::new(b),
            sigma: Box::new(sigma),
            g: Box::new(g),
            gamma: Box::new(gamma),
        }
    }

    /// n = d = 1. The θ closures receive `(t, θ, regime)`.
    pub fn scalar(
        psi: impl Fn(T, usize) -> T + Send + Sync + 'a,
        b: impl Fn(T, &ThetaPoint<T>, usize) -> T + Send + Sync + 'a,
        sigma: impl Fn(T, &ThetaPoint<T>, usize) -> T + Send + Sync + 'a,
        g: impl Fn(T, &ThetaPoint<T>, usize) -> T + Send + Sync + 'a,
        gamma: impl Fn(T) -> T + Send + Sync + 'a,
    ) -> Self {
        Self::new(
            1,
            1,
            move |y, i, out| out[0] = psi(y[0], i),
            move |s, th, out| out[0] = b(s.t, th, s.regime),
            move |s, th, out| out[0] = sigma(s.t, th, s.regime),
            move |s, th, out| out[0] = g(s.t, th, s.regime),
            move |t, out| out[0] = gamma(t),
        )
    }
}

impl<T: Scalar> CoupledCoefficients<T> for FnCoupled<'_, T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn psi(&self, y: &[T], regime: usize, out: &mut [T]) {
        (self.psi)(y, regime, out)
    }
    fn b(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]) {
        (self.b)(site, theta, out)
    }
    fn sigma(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]) {
        (self.sigma)(site, theta, out)
    }
    fn g(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]) {
        (self.g)(site, theta, out)
    }
    fn gamma(&self, t: T, out: &mut [T]) {
        (self.gamma)(t, out)
    }
}

/// Declared Lipschitz constants of each map in the order (x, y, z, r, f).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LipschitzTable<T> {
    pub psi: [T; 5],
    pub g: [T; 5],
    pub b: [T; 5],
    pub sigma: [T; 5],
}

/// How the fBm integrand moves with τ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GammaHomotopy {
    /// γ^τ = τγ.
    Scaled,
    /// γ^τ = γ.
    Fixed,
}

pub struct FbsdeSpec<'a, T> {
    pub coefficients: &'a dyn CoupledCoefficients<T>,
    pub kappa_x: T,
    pub kappa_y: T,
    pub k: T,
    pub lipschitz: LipschitzTable<T>,
    pub gamma_mode: GammaHomotopy,
}

/// Which discount conditions a spec satisfies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KConditions {
    /// κ_x > κ_y and K ∈ (κ_y, κ_x).
    pub reduced_solvable: bool,
    /// K > 0, as asked by the truncation argument for the backward part.
    pub positive_k: bool,
}

impl<T: Scalar> FbsdeSpec<'_, T> {
    pub fn k_conditions(&self) -> KConditions {
        KConditions {
            reduced_solvable: self.kappa_x > self.kappa_y && self.k > self.kappa_y && self.k < self.kappa_x,
            positive_k: self.k > T::zero(),
        }
    }

    fn check_admissible(&self) -> Result<()> {
        if !self.k_conditions().reduced_solvable {
            return Err(Error::InvalidParameter(format!(
                "need κ_x > κ_y and K in (κ_y, κ_x); got κ_x = {}, κ_y = {}, K = {}",
                self.kappa_x.as_f64(),
                self.kappa_y.as_f64(),
                self.k.as_f64()
            )));
        }
        Ok(())
    }
}

/// The τ-member of the family: Ψ^τ = τΨ, g^τ = τg − (1−τ)κ_y y,
/// b^τ = τb − (1−τ)κ_x x, σ^τ = τσ.
pub struct TauFamily<'a, T> {
    spec: &'a FbsdeSpec<'a, T>,
    tau: T,
}

impl<T: Scalar> TauFamily<'_, T> {
    pub fn tau(&self) -> T {
        self.tau
    }
}

pub fn build_tau_family<'a, T: Scalar>(spec: &'a FbsdeSpec<'a, T>, tau: T) -> Result<TauFamily<'a, T>> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::InvalidParameter(format!("τ = {} outside [0, 1]", tau.as_f64())));
    }
    Ok(TauFamily { spec, tau })
}

impl<T: Scalar> CoupledCoefficients<T> for TauFamily<'_, T> {
    fn dim(&self) -> usize {
        self.spec.coefficients.dim()
    }
    fn noise_dim(&self) -> usize {
        self.spec.coefficients.noise_dim()
    }
    fn psi(&self, y: &[T], regime: usize, out: &mut [T]) {
        self.spec.coefficients.psi(y, regime, out);
        out.iter_mut().for_each(|v| *v *= self.tau);
    }
    fn b(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]) {
        self.spec.coefficients.b(site, theta, out);
        let rest = (T::one() - self.tau) * self.spec.kappa_x;
        for (o, x) in out.iter_mut().zip(theta.x) {
            *o = self.tau * *o - rest * *x;
        }
    }
    fn sigma(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]) {
        self.spec.coefficients.sigma(site, theta, out);
        out.iter_mut().for_each(|v| *v *= self.tau);
    }
    fn g(&self, site: &Site<T>, theta: &ThetaPoint<T>, out: &mut [T]) {
        self.spec.coefficients.g(site, theta, out);
        let rest = (T::one() - self.tau) * self.spec.kappa_y;
        for (o, y) in out.iter_mut().zip(theta.y) {
            *o = self.tau * *o - rest * *y;
        }
    }
    fn gamma(&self, t: T, out: &mut [T]) {
        self.spec.coefficients.gamma(t, out);
        if self.spec.gamma_mode == GammaHomotopy::Scaled {
            out.iter_mut().for_each(|v| *v *= self.tau);
        }
    }
}

/// Solution ensemble on the bundle grid. `z`, `r`, `f` at node k act on step k.
#[derive(Clone, Debug)]
pub struct Theta<T> {
    pub grid: TimeGrid<T>,
    pub x: PathSet<T>,
    pub y: PathSet<T>,
    pub z: PathSet<T>,
    pub r: PathSet<T>,
    pub f: PathSet<T>,
}

impl<T: Scalar> Theta<T> {
    pub fn zeros(grid: &TimeGrid<T>, n_paths: usize, n: usize, d: usize, pairs: usize) -> Self {
        let nodes = grid.n_nodes();
        Self {
            grid: *grid,
            x: PathSet::zeros(n_paths, nodes, n),
            y: PathSet::zeros(n_paths, nodes, n),
            z: PathSet::zeros(n_paths, nodes, n * d),
            r: PathSet::zeros(n_paths, nodes, n),
            f: PathSet::zeros(n_paths, nodes, n * pairs),
        }
    }

    pub fn n_paths(&self) -> usize {
        self.x.n_paths()
    }

    pub fn point(&self, p: usize, k: usize) -> ThetaPoint<'_, T> {
        ThetaPoint {
            x: self.x.at(p, k),
            y: self.y.at(p, k),
            z: self.z.at(p, k),
            r: self.r.at(p, k),
            f: self.f.at(p, k),
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.x, &self.y, &self.z, &self.r, &self.f].iter().all(|s| s.all_finite())
    }

    fn parts(&self) -> [&PathSet<T>; 5] {
        [&self.x, &self.y, &self.z, &self.r, &self.f]
    }

    fn parts_mut(&mut self) -> [&mut PathSet<T>; 5] {
        [&mut self.x, &mut self.y, &mut self.z, &mut self.r, &mut self.f]
    }

    /// `time,path_id,x…,y…,z…,r…,f…`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let names = ["x", "y", "z", "r", "f"];
        write!(w, "time,path_id")?;
        for (name, part) in names.iter().zip(self.parts()) {
            for c in 0..part.dim() {
                write!(w, ",{name}{c}")?;
            }
        }
        writeln!(w)?;
        for p in 0..self.n_paths() {
            for k in 0..self.grid.n_nodes() {
                write!(w, "{},{p}", self.grid.node(k).as_f64())?;
                for part in self.parts() {
                    for v in part.at(p, k) {
                        write!(w, ",{}", v.as_f64())?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// E{|Δy(t₀)e^{Kt₀}|² + ∫|Δθ e^{Ks}|² ds}, the left side of the stability estimate.
pub fn theta_sq_distance<T: Scalar>(a: &Theta<T>, b: &Theta<T>, k: T) -> Result<T> {
    let grid = &a.grid;
    let mut total = T::zero();
    for (pa, pb) in a.parts().into_iter().zip(b.parts()) {
        total += weighted_sq_integral(&pa.difference(pb)?, k, grid)?;
    }
    total += initial_sq(&a.y.difference(&b.y)?, k, grid);
    Ok(total)
}

fn initial_sq<T: Scalar>(diff: &PathSet<T>, k: T, grid: &TimeGrid<T>) -> T {
    let w = (T::lit(2.0) * k * grid.t0()).exp();
    let n = diff.n_paths();
    let mut s = T::zero();
    for p in 0..n {
        s += diff.at(p, 0).iter().fold(T::zero(), |a, v| a + *v * *v);
    }
    w * s / T::from_count(n.max(1))
}

/// Exogenous data (ξ, φ, ψ, η) plus the deterministic fBm integrand ζ carried
/// along the continuation when γ is scaled with τ.
#[derive(Clone, Debug)]
pub struct Forcing<T> {
    /// `n_paths × 1 × n`.
    pub xi: PathSet<T>,
    pub phi: PathSet<T>,
    pub psi: PathSet<T>,
    /// `n_paths × n_nodes × (n·d)`.
    pub eta: PathSet<T>,
    /// `n_nodes × n`.
    pub zeta: Vec<T>,
}

impl<T: Scalar> Forcing<T> {
    pub fn zeros(grid: &TimeGrid<T>, n_paths: usize, n: usize, d: usize) -> Self {
        let nodes = grid.n_nodes();
        Self {
            xi: PathSet::zeros(n_paths, 1, n),
            phi: PathSet::zeros(n_paths, nodes, n),
            psi: PathSet::zeros(n_paths, nodes, n),
            eta: PathSet::zeros(n_paths, nodes, n * d),
            zeta: vec![T::zero(); nodes * n],
        }
    }

    fn check(&self, bundle: &DriverBundle<T>, n: usize, d: usize) -> Result<()> {
        let np = bundle.n_paths();
        let nodes = bundle.grid.n_nodes();
        let ok = self.xi.n_paths() == np
            && self.xi.dim() == n
            && [&self.phi, &self.psi].iter().all(|s| s.n_paths() == np && s.n_nodes() == nodes && s.dim() == n)
            && self.eta.n_paths() == np
            && self.eta.n_nodes() == nodes
            && self.eta.dim() == n * d
            && self.zeta.len() == nodes * n;
        if ok {
            Ok(())
        } else {
            Err(Error::Consistency("forcing does not match the bundle and dimensions".into()))
        }
    }
}

fn check_dims<T: Scalar>(spec: &FbsdeSpec<T>, bundle: &DriverBundle<T>) -> Result<()> {
    if spec.coefficients.noise_dim() != bundle.brownian_dim() {
        return Err(Error::Consistency(format!(
            "coefficients expect {} Brownian components, bundle has {}",
            spec.coefficients.noise_dim(),
            bundle.brownian_dim()
        )));
    }
    Ok(())
}

/// Solves the decoupled monotone system at τ = 0: x by Euler from ξ, then y by
/// the regression sweep with driver −κ_y y + φ on the driver levels (W, B^H),
/// a basis that does not move between iterates.
pub fn solve_tau0<T: Scalar>(spec: &FbsdeSpec<T>, forcing: &Forcing<T>, bundle: &DriverBundle<T>) -> Result<Theta<T>> {
    spec.check_admissible()?;
    check_dims(spec, bundle)?;
    let n = spec.coefficients.dim();
    let d = bundle.brownian_dim();
    forcing.check(bundle, n, d)?;
    let grid = bundle.grid;
    let kx = spec.kappa_x;
    let ky = spec.kappa_y;
    let base_gamma = spec.gamma_mode == GammaHomotopy::Fixed;
    let coeffs = FnCoefficients::new(
        n,
        d,
        |s, x, out| {
            let psi = forcing.psi.at(s.path, s.node);
            for ((o, xv), pv) in out.iter_mut().zip(x).zip(psi) {
                *o = *pv - kx * *xv;
            }
        },
        |s, _, out| out.copy_from_slice(forcing.eta.at(s.path, s.node)),
        |t, out| {
            let k = grid.index_at_or_before(t);
            if base_gamma {
                spec.coefficients.gamma(t, out);
            } else {
                out.iter_mut().for_each(|v| *v = T::zero());
            }
            for (o, z) in out.iter_mut().zip(&forcing.zeta[k * n..(k + 1) * n]) {
                *o += *z;
            }
        },
    );
    let fspec = ForwardSpec {
        coefficients: &coeffs,
        initial: InitialState::PerPath(forcing.xi.clone()),
        constants: ForwardConstants::new(kx, kx.abs(), T::zero(), spec.k)?,
    };
    let x = euler_solve(&fspec, bundle)?.x;
    let driver = FnDriver::new(n, |s, y, _, _, _, out| {
        let phi = forcing.phi.at(s.path, s.node);
        for ((o, yv), pv) in out.iter_mut().zip(y).zip(phi) {
            *o = *pv - ky * *yv;
        }
    });
    let features = bundle.driver_levels();
    let bspec = BackwardSpec { driver: &driver, constants: BackwardConstants::with_k(spec.k), features: Some(&features) };
    let back = solve_backward(&bspec, bundle)?;
    Ok(Theta { grid, x, y: back.y, z: back.z, r: back.r, f: back.f })
}

/// Forcing of the frozen system: ξ + δΨ(y(t₀)), φ + δ(g(θ) + κ_y y),
/// ψ + δ(b(θ) + κ_x x), η + δσ(θ), and ζ + δγ when γ is scaled.
fn frozen_forcing<T: Scalar>(
    spec: &FbsdeSpec<T>,
    base: &Forcing<T>,
    delta: T,
    theta: &Theta<T>,
    bundle: &DriverBundle<T>,
) -> Result<Forcing<T>> {
    let c = spec.coefficients;
    let n = c.dim();
    let d = c.noise_dim();
    let grid = bundle.grid;
    let mut out = base.clone();
    out.xi.try_par_fill(|p, slot| {
        let mut v = vec![T::zero(); n];
        let regime = bundle.regime(p, 0);
        c.psi(theta.y.at(p, 0), regime, &mut v);
        finite("psi", grid.t0(), regime, theta.y.at(p, 0), &v)?;
        for (s, (b, v)) in slot.iter_mut().zip(base.xi.at(p, 0).iter().zip(&v)) {
            *s = *b + delta * *v;
        }
        Ok(())
    })?;
    let fill = |target: &mut PathSet<T>,
                src: &PathSet<T>,
                width: usize,
                name: &'static str,
                eval: &(dyn Fn(&Site<T>, &ThetaPoint<T>, &mut [T]) + Sync)| {
        target.try_par_fill(|p, path| {
            let mut v = vec![T::zero(); width];
            for k in 0..grid.n_nodes() {
                let site = Site { t: grid.node(k), node: k, path: p, regime: bundle.regime(p, k) };
                let th = theta.point(p, k);
                eval(&site, &th, &mut v);
                finite(name, site.t, site.regime, th.x, &v)?;
                let row = &mut path[k * width..(k + 1) * width];
                for ((o, b), v) in row.iter_mut().zip(src.at(p, k)).zip(&v) {
                    *o = *b + delta * *v;
                }
            }
            Ok(())
        })
    };
    let (kx, ky) = (spec.kappa_x, spec.kappa_y);
    fill(&mut out.phi, &base.phi, n, "g", &|s, th, v| {
        c.g(s, th, v);
        v.iter_mut().zip(th.y).for_each(|(o, y)| *o += ky * *y);
    })?;
    fill(&mut out.psi, &base.psi, n, "b", &|s, th, v| {
        c.b(s, th, v);
        v.iter_mut().zip(th.x).for_each(|(o, x)| *o += kx * *x);
    })?;
    fill(&mut out.eta, &base.eta, n * d, "sigma", &|s, th, v| c.sigma(s, th, v))?;
    if spec.gamma_mode == GammaHomotopy::Scaled {
        let mut g = vec![T::zero(); n];
        for k in 0..grid.n_nodes() {
            c.gamma(grid.node(k), &mut g);
            finite("gamma", grid.node(k), 0, &[], &g)?;
            for (o, v) in out.zeta[k * n..(k + 1) * n].iter_mut().zip(&g) {
                *o += delta * *v;
            }
        }
    }
    Ok(out)
}

fn finite<T: Scalar>(name: &'static str, t: T, regime: usize, x: &[T], v: &[T]) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::Coefficient { name, t: t.as_f64(), regime, x: x.iter().map(|a| a.as_f64()).collect() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuationOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Smallest admissible τ-step before giving up.
    pub delta_floor: T,
    pub seed: u64,
}

impl<T: Scalar> ContinuationOptions<T> {
    pub fn new(tol: T, max_iter: usize, seed: u64) -> Self {
        Self { tol, max_iter, delta_floor: T::lit(1e-4), seed }
    }
}

/// Solves the system of a τ-ladder `0 = τ_0 < … < τ_j` with the given forcing,
/// nesting one fixed-point loop per rung.
fn solve_ladder<T: Scalar>(
    spec: &FbsdeSpec<T>,
    ladder: &[T],
    forcing: &Forcing<T>,
    warm: Option<&Theta<T>>,
    bundle: &DriverBundle<T>,
    opts: &ContinuationOptions<T>,
) -> Result<Theta<T>> {
    let j = ladder.len() - 1;
    if j == 0 {
        return solve_tau0(spec, forcing, bundle);
    }
    let delta = ladder[j] - ladder[j - 1];
    let inner = ContinuationOptions { tol: opts.tol * T::lit(0.25), ..*opts };
    let start = match warm {
        Some(t) => t.clone(),
        None => solve_ladder(spec, &ladder[..j], forcing, None, bundle, &inner)?,
    };
    let (theta, report) = iterate_map(spec, &ladder[..j], delta, start, forcing, bundle, &inner, opts.tol)?;
    if !report.converged {
        return Err(Error::NonConvergence(format!(
            "rung τ = {} did not settle in {} iterations",
            ladder[j].as_f64(),
            opts.max_iter
        )));
    }
    Ok(theta)
}

/// Per-step contraction diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport<T> {
    pub delta: T,
    pub iterations: usize,
    /// Root distances between successive iterates.
    pub distances: Vec<T>,
    /// Ratios of successive squared distances.
    pub ratios: Vec<T>,
    /// Largest observed ratio divided by δ².
    pub c5_hat: T,
    pub converged: bool,
}

#[allow(clippy::too_many_arguments)]
fn iterate_map<T: Scalar>(
    spec: &FbsdeSpec<T>,
    base_ladder: &[T],
    delta: T,
    start: Theta<T>,
    forcing: &Forcing<T>,
    bundle: &DriverBundle<T>,
    inner: &ContinuationOptions<T>,
    tol: T,
) -> Result<(Theta<T>, StepReport<T>)> {
    let mut report = StepReport {
        delta,
        iterations: 0,
        distances: Vec::new(),
        ratios: Vec::new(),
        c5_hat: T::zero(),
        converged: false,
    };
    let mut theta = start;
    let mut sq_prev: Option<T> = None;
    let mut rising = 0usize;
    for _ in 0..inner.max_iter {
        let f = frozen_forcing(spec, forcing, delta, &theta, bundle)?;
        let next = solve_ladder(spec, base_ladder, &f, Some(&theta), bundle, inner)?;
        let sq = theta_sq_distance(&next, &theta, spec.k)?;
        report.iterations += 1;
        report.distances.push(sq.sqrt());
        if let Some(prev) = sq_prev {
            if prev > T::zero() {
                let ratio = sq / prev;
                report.ratios.push(ratio);
                if delta > T::zero() {
                    report.c5_hat = report.c5_hat.max(ratio / (delta * delta));
                }
                rising = if ratio >= T::one() { rising + 1 } else { 0 };
                if rising >= 3 {
                    return Err(Error::Divergence(format!(
                        "squared-distance ratio ≥ 1 for 3 iterations at δ = {}; try a smaller step",
                        delta.as_f64()
                    )));
                }
            }
        }
        theta = next;
        if !sq.is_finite() {
            return Err(Error::Divergence(format!("non-finite iterate distance at δ = {}", delta.as_f64())));
        }
        if sq.sqrt() < tol {
            report.converged = true;
            break;
        }
        sq_prev = Some(sq);
    }
    Ok((theta, report))
}

/// Iterates 𝒯_{τ₀+δ} from `prior`, which solves the ladder's last rung τ₀.
#[allow(clippy::too_many_arguments)]
pub fn continuation_step<T: Scalar>(
    spec: &FbsdeSpec<T>,
    ladder: &[T],
    delta: T,
    prior: &Theta<T>,
    forcing: &Forcing<T>,
    bundle: &DriverBundle<T>,
    opts: &ContinuationOptions<T>,
) -> Result<(Theta<T>, StepReport<T>)> {
    let tau0 = check_ladder(ladder)?;
    if !(delta >= T::zero()) || tau0 + delta > T::one() + T::lit(1e-12) {
        return Err(Error::InvalidParameter(format!(
            "step δ = {} from τ₀ = {} leaves [0, 1]",
            delta.as_f64(),
            tau0.as_f64()
        )));
    }
    if delta == T::zero() {
        let report = StepReport {
            delta,
            iterations: 1,
            distances: vec![T::zero()],
            ratios: Vec::new(),
            c5_hat: T::zero(),
            converged: true,
        };
        return Ok((prior.clone(), report));
    }
    let inner = ContinuationOptions { tol: opts.tol * T::lit(0.25), ..*opts };
    iterate_map(spec, ladder, delta, prior.clone(), forcing, bundle, &inner, opts.tol)
}

fn check_ladder<T: Scalar>(ladder: &[T]) -> Result<T> {
    if ladder.first() != Some(&T::zero()) || ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("τ-ladder must start at 0 and increase".into()));
    }
    Ok(*ladder.last().unwrap())
}

/// Ĉ₅ by power iteration on probe pairs: starting from a smooth perturbation
/// h₀ of `prior`, h_{j+1} = 𝒯(prior + h_j) − 𝒯(prior) and
/// Ĉ₅ = max_j |h_{j+1}|² / (δ² |h_j|²).
#[allow(clippy::too_many_arguments)]
pub fn measure_c5<T: Scalar>(
    spec: &FbsdeSpec<T>,
    ladder: &[T],
    delta: T,
    prior: &Theta<T>,
    forcing: &Forcing<T>,
    bundle: &DriverBundle<T>,
    opts: &ContinuationOptions<T>,
) -> Result<T> {
    check_ladder(ladder)?;
    if !(delta > T::zero()) {
        return Err(Error::InvalidParameter("probe step must be positive".into()));
    }
    let inner = ContinuationOptions { tol: opts.tol * T::lit(0.25), ..*opts };
    let apply = |theta: &Theta<T>| -> Result<Theta<T>> {
        let f = frozen_forcing(spec, forcing, delta, theta, bundle)?;
        solve_ladder(spec, ladder, &f, Some(prior), bundle, &inner)
    };
    let base = apply(prior)?;
    let mut h = probe_direction(prior, opts.seed);
    let size = theta_sq_distance(&h, &zeros_like(prior), spec.k)?;
    let mut c5 = T::zero();
    for _ in 0..PROBE_ROUNDS {
        let input = theta_sq_distance(&h, &zeros_like(prior), spec.k)?;
        if !(input > T::zero()) {
            break;
        }
        let shifted = add(prior, &h, T::one())?;
        let out = apply(&shifted)?;
        let diff = sub(&out, &base)?;
        let output = theta_sq_distance(&diff, &zeros_like(prior), spec.k)?;
        c5 = c5.max(output / (delta * delta * input));
        if !(output > T::zero()) {
            break;
        }
        h = scale(&diff, (size / output).sqrt());
    }
    Ok(c5)
}

const PROBE_ROUNDS: usize = 4;

fn zeros_like<T: Scalar>(t: &Theta<T>) -> Theta<T> {
    let mut z = t.clone();
    for part in z.parts_mut() {
        part.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
    z
}

fn add<T: Scalar>(a: &Theta<T>, b: &Theta<T>, c: T) -> Result<Theta<T>> {
    let mut out = a.clone();
    for (o, p) in out.parts_mut().into_iter().zip(b.parts()) {
        o.axpy(c, p)?;
    }
    Ok(out)
}

fn sub<T: Scalar>(a: &Theta<T>, b: &Theta<T>) -> Result<Theta<T>> {
    add(a, b, -T::one())
}

fn scale<T: Scalar>(a: &Theta<T>, c: T) -> Theta<T> {
    let mut out = a.clone();
    for part in out.parts_mut() {
        part.data_mut().iter_mut().for_each(|v| *v *= c);
    }
    out
}

/// Smooth adapted perturbation: a deterministic time profile plus a term
/// proportional to the centred state x, drawn once per component.
fn probe_direction<T: Scalar>(prior: &Theta<T>, seed: u64) -> Theta<T> {
    let mut h = zeros_like(prior);
    let grid = prior.grid;
    let x = &prior.x;
    let np = x.n_paths();
    let nodes = grid.n_nodes();
    let n = x.dim();
    let mut centred = vec![T::zero(); nodes * n];
    let mut spread = vec![T::zero(); nodes * n];
    for k in 0..nodes {
        for c in 0..n {
            let m = x.mean_at(k, c);
            let v = (0..np).fold(T::zero(), |a, p| a + (x.get(p, k, c) - m) * (x.get(p, k, c) - m));
            centred[k * n + c] = m;
            spread[k * n + c] = (v / T::from_count(np.max(1))).sqrt();
        }
    }
    let span = grid.span().max(T::lit(1e-12));
    for (idx, part) in h.parts_mut().into_iter().enumerate() {
        let mut rng = substream(seed, StreamTag::Perturbation, idx as u64);
        let dim = part.dim();
        let coef: Vec<(T, T, T)> = (0..dim)
            .map(|_| (normal::<T>(&mut rng), normal::<T>(&mut rng), T::lit(rng.gen_range(0.5..2.0))))
            .collect();
        part.par_fill(|p, path| {
            for k in 0..nodes {
                let s = (grid.node(k) - grid.t0()) / span;
                for (c, (a, b, w)) in coef.iter().enumerate() {
                    let xc = c % n.max(1);
                    let sd = spread[k * n + xc];
                    let state = if sd > T::zero() { (x.get(p, k, xc) - centred[k * n + xc]) / sd } else { T::zero() };
                    let v = *a * (*w * s * T::lit(3.0)).cos() + *b * state * T::lit(0.5);
                    path[k * dim + c] = T::lit(0.1) * v;
                }
            }
        });
    }
    h
}

/// Accepted steps of the τ-march plus the rejected attempts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuationTrace {
    pub steps: Vec<TraceStep>,
    pub rejected: Vec<TraceStep>,
    /// Root distance moved by one unfrozen forward/backward sweep at τ = 1.
    pub final_residual: f64,
}

impl ContinuationTrace {
    pub fn taus(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.tau).collect()
    }
}

/// Marches τ from 0 to 1 with (ξ, ρ) = (0, 0).
pub fn solve_fbsde<T: Scalar>(
    spec: &FbsdeSpec<T>,
    bundle: &DriverBundle<T>,
    opts: &ContinuationOptions<T>,
) -> Result<(Theta<T>, ContinuationTrace)> {
    let n = spec.coefficients.dim();
    let forcing = Forcing::zeros(&bundle.grid, bundle.n_paths(), n, bundle.brownian_dim());
    solve_fbsde_forced(spec, &forcing, bundle, opts)
}

/// Marches τ from 0 to 1 with the given exogenous forcing. Steps start at
/// min(remaining, δ₀, 2·previous δ) with δ₀ = 1/(2√Ĉ₅) and halve on failure.
pub fn solve_fbsde_forced<T: Scalar>(
    spec: &FbsdeSpec<T>,
    forcing: &Forcing<T>,
    bundle: &DriverBundle<T>,
    opts: &ContinuationOptions<T>,
) -> Result<(Theta<T>, ContinuationTrace)> {
    let mut theta = solve_tau0(spec, forcing, bundle)?;
    let mut trace = ContinuationTrace {
        steps: vec![TraceStep { tau: 0.0, delta: 0.0, iterations: 1, distance: 0.0, c5_hat: 0.0, accepted: true }],
        rejected: Vec::new(),
        final_residual: f64::NAN,
    };
    let mut ladder = vec![T::zero()];
    let mut last_delta: Option<T> = None;
    let mut last_c5 = T::zero();
    let mut last_error = String::from("iteration limit reached");
    let one = T::one();
    while *ladder.last().unwrap() < one {
        let tau0 = *ladder.last().unwrap();
        let remaining = one - tau0;
        let trial = last_delta.map_or(remaining, |d| (d * T::lit(2.0)).min(remaining));
        let mut c5 = match measure_c5(spec, &ladder, trial, &theta, forcing, bundle, opts) {
            Ok(v) => v,
            Err(e) if recoverable(&e) => last_c5,
            Err(e) => return Err(e),
        };
        let mut delta = trial;
        if c5 > T::zero() {
            delta = delta.min(T::one() / (T::lit(2.0) * c5.sqrt()));
        }
        loop {
            if delta < opts.delta_floor {
                let mut all = trace.steps.clone();
                all.extend(trace.rejected.iter().cloned());
                return Err(Error::ContinuationFailed {
                    message: format!(
                        "τ-step fell below {} at τ = {} (last failure: {last_error})",
                        opts.delta_floor.as_f64(),
                        tau0.as_f64()
                    ),
                    trace: all,
                });
            }
            let outcome = continuation_step(spec, &ladder, delta, &theta, forcing, bundle, opts);
            match outcome {
                Ok((next, rep)) if rep.converged => {
                    c5 = c5.max(rep.c5_hat);
                    let mut tau = tau0 + delta;
                    if (one - tau).abs() <= T::lit(1e-12) {
                        tau = one;
                    }
                    trace.steps.push(step_record(tau, delta, &rep, c5, true));
                    ladder.push(tau);
                    theta = next;
                    last_delta = Some(delta);
                    last_c5 = c5;
                    break;
                }
                Ok((_, rep)) => {
                    last_error = "iteration limit reached".into();
                    trace.rejected.push(step_record(tau0 + delta, delta, &rep, c5.max(rep.c5_hat), false));
                }
                Err(e) if recoverable(&e) => {
                    last_error = e.to_string();
                    trace.rejected.push(TraceStep {
                        tau: (tau0 + delta).as_f64(),
                        delta: delta.as_f64(),
                        iterations: opts.max_iter,
                        distance: f64::INFINITY,
                        c5_hat: c5.as_f64(),
                        accepted: false,
                    });
                }
                Err(e) => return Err(e),
            }
            delta *= T::lit(0.5);
        }
    }
    trace.final_residual = fixed_point_residual(spec, forcing, &theta, bundle)?.as_f64();
    Ok((theta, trace))
}

/// Failures that signal an over-long τ-step rather than a broken problem.
fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence(_) | Error::NonConvergence(_) | Error::Conditioning(_) | Error::Coefficient { .. }
    )
}

fn step_record<T: Scalar>(tau: T, delta: T, rep: &StepReport<T>, c5: T, accepted: bool) -> TraceStep {
    TraceStep {
        tau: tau.as_f64(),
        delta: delta.as_f64(),
        iterations: rep.iterations,
        distance: rep.distances.last().map_or(0.0, |d| d.as_f64()),
        c5_hat: c5.as_f64(),
        accepted,
    }
}

/// Root distance between θ and one sweep of the τ = 0 solver with the full
/// coefficients frozen at θ.
pub fn fixed_point_residual<T: Scalar>(
    spec: &FbsdeSpec<T>,
    forcing: &Forcing<T>,
    theta: &Theta<T>,
    bundle: &DriverBundle<T>,
) -> Result<T> {
    let f = frozen_forcing(spec, forcing, T::one(), theta, bundle)?;
    let next = solve_tau0(spec, &f, bundle)?;
    Ok(theta_sq_distance(&next, theta, spec.k)?.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairStability {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// Ĉ·rhs − lhs.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Smallest constant covering every pair.
    pub c_hat: f64,
    pub pairs: Vec<PairStability>,
}

/// Both sides of the stability estimate for each (perturbed spec, its solution)
/// against the reference solution `theta`; Ĉ is the largest lhs/rhs ratio.
pub fn coupled_stability_check<T: Scalar>(
    spec: &FbsdeSpec<T>,
    theta: &Theta<T>,
    perturbed: &[(&FbsdeSpec<T>, &Theta<T>)],
    bundle: &DriverBundle<T>,
) -> Result<StabilityReport> {
    let grid = bundle.grid;
    let n = spec.coefficients.dim();
    let d = spec.coefficients.noise_dim();
    let k = spec.k;
    let mut rows = Vec::with_capacity(perturbed.len());
    for (other, bar) in perturbed {
        let lhs = theta_sq_distance(theta, bar, k)?;
        let mut psi_diff = PathSet::zeros(bar.n_paths(), 1, n);
        let mut gamma_diff = [
            PathSet::zeros(bar.n_paths(), grid.n_nodes(), n),
            PathSet::zeros(bar.n_paths(), grid.n_nodes(), n),
            PathSet::zeros(bar.n_paths(), grid.n_nodes(), n * d),
        ];
        psi_diff.par_fill(|p, slot| {
            let mut a = vec![T::zero(); n];
            let mut b = vec![T::zero(); n];
            let regime = bundle.regime(p, 0);
            spec.coefficients.psi(bar.y.at(p, 0), regime, &mut a);
            other.coefficients.psi(bar.y.at(p, 0), regime, &mut b);
            for ((s, a), b) in slot.iter_mut().zip(&a).zip(&b) {
                *s = *a - *b;
            }
        });
        for (which, target) in gamma_diff.iter_mut().enumerate() {
            let width = target.dim();
            target.par_fill(|p, path| {
                let mut a = vec![T::zero(); width];
                let mut b = vec![T::zero(); width];
                for kk in 0..grid.n_nodes() {
                    let site = Site { t: grid.node(kk), node: kk, path: p, regime: bundle.regime(p, kk) };
                    let th = bar.point(p, kk);
                    match which {
                        0 => {
                            spec.coefficients.g(&site, &th, &mut a);
                            other.coefficients.g(&site, &th, &mut b);
                        }
                        1 => {
                            spec.coefficients.b(&site, &th, &mut a);
                            other.coefficients.b(&site, &th, &mut b);
                        }
                        _ => {
                            spec.coefficients.sigma(&site, &th, &mut a);
                            other.coefficients.sigma(&site, &th, &mut b);
                        }
                    }
                    for ((o, a), b) in path[kk * width..(kk + 1) * width].iter_mut().zip(&a).zip(&b) {
                        *o = *a - *b;
                    }
                }
            });
        }
        let mut rhs = initial_sq(&psi_diff, k, &grid);
        for g in &gamma_diff {
            rhs += weighted_sq_integral(g, k, &grid)?;
        }
        rows.push((lhs.as_f64(), rhs.as_f64()));
    }
    let c_hat = rows
        .iter()
        .filter(|(_, r)| *r > 0.0)
        .map(|(l, r)| l / r)
        .fold(0.0f64, f64::max);
    let pairs = rows
        .into_iter()
        .map(|(lhs, rhs)| PairStability {
            lhs,
            rhs,
            ratio: if rhs > 0.0 { lhs / rhs } else if lhs == 0.0 { 0.0 } else { f64::INFINITY },
            margin: c_hat * rhs - lhs,
        })
        .collect();
    Ok(StabilityReport { c_hat, pairs })
}
