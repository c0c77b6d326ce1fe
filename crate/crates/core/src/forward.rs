//! Forward SDE dx = b ds + Σ σ_i dW_i + γ dB^H with regime-modulated coefficients.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::drivers::{substream, DriverBundle, StreamTag};
use crate::error::{Error, Result};
use crate::paths::PathSet;
use crate::scalar::Scalar;
use crate::timegrid::{weighted_history_integral, weighted_sq_integral, TimeGrid};

/// Where a coefficient is being evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site<T> {
    pub t: T,
    pub node: usize,
    pub path: usize,
    pub regime: usize,
}

impl<T: Scalar> Site<T> {
    pub fn at(t: T, regime: usize) -> Self {
        Self { t, node: 0, path: 0, regime }
    }
}

/// Coefficients of the forward equation. `diffusion` fills an `n × d` row-major matrix
/// whose column `i` is σ_i. `fbm_coefficient` is the deterministic γ(t).
pub trait ForwardCoefficients<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, site: &Site<T>, x: &[T], out: &mut [T]);
    fn diffusion(&self, site: &Site<T>, x: &[T], out: &mut [T]);
    fn fbm_coefficient(&self, t: T, out: &mut [T]);
}

type VecFn<'a, T> = Box<dyn Fn(&Site<T>, &[T], &mut [T]) + Send + Sync + 'a>;
type TimeFn<'a, T> = Box<dyn Fn(T, &mut [T]) + Send + Sync + 'a>;

/// Closure-backed coefficients.
pub struct FnCoefficients<'a, T> {
    dim: usize,
    noise_dim: usize,
    drift: VecFn<'a, T>,
    diffusion: VecFn<'a, T>,
    fbm: TimeFn<'a, T>,
}

impl<'a, T: Scalar> FnCoefficients<'a, T> {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: impl Fn(&Site<T>, &[T], &mut [T]) + Send + Sync + 'a,
        diffusion: impl Fn(&Site<T>, &[T], &mut [T]) + Send + Sync + 'a,
        fbm: impl Fn(T, &mut [T]) + Send + Sync + 'a,
    ) -> Self {
        Self {
            dim,
            noise_dim,
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            fbm: Box::new(fbm),
        }
    }

    /// One state component, one Brownian component.
    pub fn scalar(
        b: impl Fn(T, T, usize) -> T + Send + Sync + 'a,
        sigma: impl Fn(T, T, usize) -> T + Send + Sync + 'a,
        gamma: impl Fn(T) -> T + Send + Sync + 'a,
    ) -> Self {
        Self::new(
            1,
            1,
            move |s, x, out| out[0] = b(s.t, x[0], s.regime),
            move |s, x, out| out[0] = sigma(s.t, x[0], s.regime),
            move |t, out| out[0] = gamma(t),
        )
    }
}

impl<T: Scalar> ForwardCoefficients<T> for FnCoefficients<'_, T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, site: &Site<T>, x: &[T], out: &mut [T]) {
        (self.drift)(site, x, out)
    }
    fn diffusion(&self, site: &Site<T>, x: &[T], out: &mut [T]) {
        (self.diffusion)(site, x, out)
    }
    fn fbm_coefficient(&self, t: T, out: &mut [T]) {
        (self.fbm)(t, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialState<T> {
    Fixed(Vec<T>),
    /// One draw per path, `n_paths × 1 × dim`.
    PerPath(PathSet<T>),
}

impl<T: Scalar> InitialState<T> {
    pub fn of(&self, p: usize) -> &[T] {
        match self {
            Self::Fixed(v) => v,
            Self::PerPath(set) => set.at(p, 0),
        }
    }

    /// Gaussian initial data `mean + sd·N(0, I)` on the initial-state substream.
    pub fn gaussian(mean: &[T], sd: T, n_paths: usize, seed: u64) -> Self {
        let dim = mean.len();
        let mut set = PathSet::zeros(n_paths, 1, dim);
        set.par_fill(|p, out| {
            let mut rng = substream(seed, StreamTag::InitialState, p as u64);
            for (o, m) in out.iter_mut().zip(mean) {
                *o = *m + sd * crate::drivers::normal::<T>(&mut rng);
            }
        });
        Self::PerPath(set)
    }
}

/// Declared constants of the monotone/Lipschitz structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConstants<T> {
    pub kappa_x: T,
    pub l_bx: T,
    pub l_sigma_x: T,
    pub k: T,
}

impl<T: Scalar> ForwardConstants<T> {
    pub fn new(kappa_x: T, l_bx: T, l_sigma_x: T, k: T) -> Result<Self> {
        if ![kappa_x, l_bx, l_sigma_x, k].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("forward constants must be finite".into()));
        }
        Ok(Self { kappa_x, l_bx, l_sigma_x, k })
    }

    /// κ_x − l_σx²/2, the supremum of admissible discounts.
    pub fn k_bound(&self) -> T {
        self.kappa_x - self.l_sigma_x * self.l_sigma_x * T::lit(0.5)
    }
}

pub struct ForwardSpec<'a, T> {
    pub coefficients: &'a dyn ForwardCoefficients<T>,
    pub initial: InitialState<T>,
    pub constants: ForwardConstants<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Picard,
}

#[derive(Clone, Debug)]
pub struct PathSolution<T> {
    pub grid: TimeGrid<T>,
    pub x: PathSet<T>,
    pub method: Method,
    pub seed: u64,
}

impl<T: Scalar> PathSolution<T> {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let cols: Vec<String> = (1..=self.x.dim()).map(|i| format!("x{i}")).collect();
        self.x.write_csv(w, &cols, |k| self.grid.node(k))
    }
}

fn check_finite<T: Scalar>(name: &'static str, site: &Site<T>, x: &[T], out: &[T]) -> Result<()> {
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Coefficient {
            name,
            t: site.t.as_f64(),
            regime: site.regime,
            x: x.iter().map(|v| v.as_f64()).collect(),
        })
    }
}

fn check_spec<T: Scalar>(spec: &ForwardSpec<T>, bundle: &DriverBundle<T>) -> Result<()> {
    let c = spec.coefficients;
    if c.noise_dim() != bundle.brownian_dim() {
        return Err(Error::Consistency(format!(
            "coefficients expect {} Brownian components, bundle has {}",
            c.noise_dim(),
            bundle.brownian_dim()
        )));
    }
    match &spec.initial {
        InitialState::Fixed(v) if v.len() != c.dim() => {
            Err(Error::Consistency("initial state dimension mismatch".into()))
        }
        InitialState::PerPath(set) if set.dim() != c.dim() || set.n_paths() != bundle.n_paths() => {
            Err(Error::Consistency("per-path initial states do not match the bundle".into()))
        }
        _ => Ok(()),
    }
}

/// γ at every grid node, `n_nodes × n`.
pub fn fbm_coefficient_path<T: Scalar>(c: &dyn ForwardCoefficients<T>, grid: &TimeGrid<T>) -> Result<Vec<T>> {
    let n = c.dim();
    let mut out = vec![T::zero(); grid.n_nodes() * n];
    for k in 0..grid.n_nodes() {
        let t = grid.node(k);
        let slot = &mut out[k * n..(k + 1) * n];
        c.fbm_coefficient(t, slot);
        check_finite("gamma", &Site::at(t, 0), &[], slot)?;
    }
    Ok(out)
}

/// Left-point integral map: writes `x0 + Σ_{j<k}[b(x̃_j)dt + σ(x̃_j)ΔW_j + γ_j ΔB_j]`
/// into `path`, with `x̃ = source` when given and the path itself otherwise.
fn integrate_path<T: Scalar>(
    spec: &ForwardSpec<T>,
    bundle: &DriverBundle<T>,
    gamma: &[T],
    p: usize,
    path: &mut [T],
    source: Option<&[T]>,
) -> Result<()> {
    let c = spec.coefficients;
    let n = c.dim();
    let d = c.noise_dim();
    let grid = &bundle.grid;
    let dt = grid.dt();
    let mut b = vec![T::zero(); n];
    let mut s = vec![T::zero(); n * d];
    let mut xk = vec![T::zero(); n];
    path[..n].copy_from_slice(spec.initial.of(p));
    for k in 0..grid.n_steps() {
        match source {
            Some(src) => xk.copy_from_slice(&src[k * n..(k + 1) * n]),
            None => xk.copy_from_slice(&path[k * n..(k + 1) * n]),
        }
        let site = Site { t: grid.node(k), node: k, path: p, regime: bundle.regime(p, k) };
        c.drift(&site, &xk, &mut b);
        check_finite("b", &site, &xk, &b)?;
        c.diffusion(&site, &xk, &mut s);
        check_finite("sigma", &site, &xk, &s)?;
        let dw = bundle.dw(p, k);
        let db = bundle.dbh(p, k);
        for r in 0..n {
            let mut v = path[k * n + r] + b[r] * dt + gamma[k * n + r] * db;
            for (i, w) in dw.iter().enumerate() {
                v += s[r * d + i] * *w;
            }
            path[(k + 1) * n + r] = v;
        }
    }
    Ok(())
}

/// Explicit Euler–Maruyama with left-endpoint (pre-jump) regimes.
pub fn euler_solve<T: Scalar>(spec: &ForwardSpec<T>, bundle: &DriverBundle<T>) -> Result<PathSolution<T>> {
    check_spec(spec, bundle)?;
    let n = spec.coefficients.dim();
    let gamma = fbm_coefficient_path(spec.coefficients, &bundle.grid)?;
    let mut x = PathSet::zeros(bundle.n_paths(), bundle.grid.n_nodes(), n);
    x.try_par_fill(|p, path| integrate_path(spec, bundle, &gamma, p, path, None))?;
    Ok(PathSolution { grid: bundle.grid, x, method: Method::Euler, seed: bundle.seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionReport<T> {
    pub a: T,
    pub horizon: T,
    /// [1−e^{−aT}]·2L²(T+1)/a.
    pub factor: T,
    /// Squared equivalent-norm distances between consecutive iterates.
    pub distances: Vec<T>,
    pub ratios: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// (1−e^{−aT})·2L²(T+1)/a.
pub fn picard_factor<T: Scalar>(l: T, horizon: T, a: T) -> T {
    (T::one() - (-a * horizon).exp()) * T::lit(2.0) * l * l * (horizon + T::one()) / a
}

/// sup_t e^{−a(t−t0)} E ∫_{t0}^t |Δ(s)|² ds, squared.
pub fn equivalent_sq_distance<T: Scalar>(
    x: &PathSet<T>,
    y: &PathSet<T>,
    a: T,
    grid: &TimeGrid<T>,
) -> Result<T> {
    if !x.same_shape(y) {
        return Err(Error::Consistency("iterates differ in shape".into()));
    }
    let n_paths = x.n_paths();
    let m2: Vec<T> = (0..grid.n_nodes())
        .map(|k| {
            let mut s = T::zero();
            for p in 0..n_paths {
                for (u, v) in x.at(p, k).iter().zip(y.at(p, k)) {
                    s += (*u - *v) * (*u - *v);
                }
            }
            s / T::from_count(n_paths)
        })
        .collect();
    let half = grid.dt() * T::lit(0.5);
    let mut acc = T::zero();
    let mut best = T::zero();
    for k in 1..grid.n_nodes() {
        acc += half * (m2[k - 1] + m2[k]);
        best = best.max((-a * (grid.node(k) - grid.t0())).exp() * acc);
    }
    Ok(best)
}

/// Picard iteration of the integral map from the constant path x⁰ ≡ x0.
pub fn picard_solve<T: Scalar>(
    spec: &ForwardSpec<T>,
    bundle: &DriverBundle<T>,
    horizon: T,
    a: T,
    tol: T,
    max_iter: usize,
) -> Result<(PathSolution<T>, ContractionReport<T>)> {
    check_spec(spec, bundle)?;
    let grid = bundle.grid;
    if !(a > T::zero()) {
        return Err(Error::InvalidParameter("weight parameter a must be positive".into()));
    }
    if (grid.t0() + horizon - grid.t_end()).abs() > grid.dt() * T::lit(1e-6) {
        return Err(Error::Consistency("bundle grid must end at t0 + T".into()));
    }
    let c = &spec.constants;
    let l = c.l_bx.max(c.l_sigma_x);
    let factor = picard_factor(l, horizon, a);
    if factor >= T::one() {
        return Err(Error::ContractionRefused(format!(
            "factor {:.4} ≥ 1 for a = {}; raise a",
            factor.as_f64(),
            a.as_f64()
        )));
    }
    let n = spec.coefficients.dim();
    let gamma = fbm_coefficient_path(spec.coefficients, &grid)?;
    let mut current = PathSet::zeros(bundle.n_paths(), grid.n_nodes(), n);
    current.par_fill(|p, path| {
        let x0 = spec.initial.of(p);
        for k in 0..grid.n_nodes() {
            path[k * n..(k + 1) * n].copy_from_slice(x0);
        }
    });
    let mut distances = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut next = PathSet::zeros(bundle.n_paths(), grid.n_nodes(), n);
        next.try_par_fill(|p, path| integrate_path(spec, bundle, &gamma, p, path, Some(current.path(p))))?;
        let d = equivalent_sq_distance(&next, &current, a, &grid)?;
        distances.push(d);
        current = next;
        if d.sqrt() < tol {
            converged = true;
            break;
        }
    }
    let ratios = distances
        .windows(2)
        .filter(|w| w[0] > T::zero())
        .map(|w| w[1] / w[0])
        .collect();
    let report = ContractionReport {
        a,
        horizon,
        factor,
        iterations: distances.len(),
        distances,
        ratios,
        converged,
    };
    Ok((PathSolution { grid, x: current, method: Method::Picard, seed: bundle.seed }, report))
}

/// Sampling window for [`probe_assumption_a`]: every state component in `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeBox<T> {
    pub lo: T,
    pub hi: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport<T> {
    pub l_bx: T,
    pub l_sigma_x: T,
    pub kappa_x: T,
    pub samples: usize,
    pub violations: Vec<String>,
}

/// Samples pairs `(x, x̄)` and estimates the tightest Lipschitz and monotonicity
/// constants of `b` and `σ`; reports every declared constant the samples contradict.
pub fn probe_assumption_a<T: Scalar>(
    coefficients: &dyn ForwardCoefficients<T>,
    declared: &ForwardConstants<T>,
    grid: &TimeGrid<T>,
    m: usize,
    samples: usize,
    window: ProbeBox<T>,
    seed: u64,
) -> Result<ProbeReport<T>> {
    if !(window.hi > window.lo) || samples == 0 || m == 0 {
        return Err(Error::DegenerateInput("probe box or sample count is degenerate".into()));
    }
    let n = coefficients.dim();
    let d = coefficients.noise_dim();
    let span = window.hi - window.lo;
    // (lipschitz b, lipschitz σ, monotonicity, witness)
    let per: Vec<(T, T, T, Site<T>, Vec<T>, Vec<T>)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, StreamTag::Probe, i as u64);
            let node = rng.gen_range(0..grid.n_nodes());
            let regime = rng.gen_range(0..m);
            let site = Site { t: grid.node(node), node, path: 0, regime };
            let x: Vec<T> = (0..n).map(|_| window.lo + span * T::lit(rng.gen::<f64>())).collect();
            let xb: Vec<T> = (0..n).map(|_| window.lo + span * T::lit(rng.gen::<f64>())).collect();
            let (mut b1, mut b2) = (vec![T::zero(); n], vec![T::zero(); n]);
            let (mut s1, mut s2) = (vec![T::zero(); n * d], vec![T::zero(); n * d]);
            coefficients.drift(&site, &x, &mut b1);
            coefficients.drift(&site, &xb, &mut b2);
            coefficients.diffusion(&site, &x, &mut s1);
            coefficients.diffusion(&site, &xb, &mut s2);
            let dx2 = x.iter().zip(&xb).fold(T::zero(), |a, (u, v)| a + (*u - *v) * (*u - *v));
            let db2 = b1.iter().zip(&b2).fold(T::zero(), |a, (u, v)| a + (*u - *v) * (*u - *v));
            let ds2 = s1.iter().zip(&s2).fold(T::zero(), |a, (u, v)| a + (*u - *v) * (*u - *v));
            let inner = b1
                .iter()
                .zip(&b2)
                .zip(x.iter().zip(&xb))
                .fold(T::zero(), |a, ((p, q), (u, v))| a + (*p - *q) * (*u - *v));
            if dx2 > T::zero() {
                (
                    (db2 / dx2).sqrt(),
                    (ds2 / dx2).sqrt(),
                    -inner / dx2,
                    site,
                    x,
                    xb,
                )
            } else {
                (T::zero(), T::zero(), T::max_value().unwrap(), site, x, xb)
            }
        })
        .collect();
    let mut l_bx = T::zero();
    let mut l_sx = T::zero();
    let mut kappa = T::max_value().unwrap();
    let mut worst_kappa = 0usize;
    for (i, (lb, ls, kp, ..)) in per.iter().enumerate() {
        l_bx = l_bx.max(*lb);
        l_sx = l_sx.max(*ls);
        if *kp < kappa {
            kappa = *kp;
            worst_kappa = i;
        }
    }
    let slack = |v: T| T::lit(1e-9) * v.abs().max(T::one());
    let mut violations = Vec::new();
    if kappa < declared.kappa_x - slack(declared.kappa_x) {
        let (_, _, _, site, x, xb) = &per[worst_kappa];
        violations.push(format!(
            "monotonicity: observed κ_x = {:.6} below declared {:.6} at t = {}, regime {}, x = {:?}, x̄ = {:?}",
            kappa.as_f64(),
            declared.kappa_x.as_f64(),
            site.t.as_f64(),
            site.regime + 1,
            x.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            xb.iter().map(|v| v.as_f64()).collect::<Vec<_>>()
        ));
    }
    if l_bx > declared.l_bx + slack(declared.l_bx) {
        violations.push(format!(
            "drift Lipschitz: observed {:.6} above declared {:.6}",
            l_bx.as_f64(),
            declared.l_bx.as_f64()
        ));
    }
    if l_sx > declared.l_sigma_x + slack(declared.l_sigma_x) {
        violations.push(format!(
            "diffusion Lipschitz: observed {:.6} above declared {:.6}",
            l_sx.as_f64(),
            declared.l_sigma_x.as_f64()
        ));
    }
    Ok(ProbeReport { l_bx, l_sigma_x: l_sx, kappa_x: kappa, samples, violations })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport<T> {
    pub k: T,
    /// E[|x(t_k)|² e^{2K t_k}] at every node.
    pub curve: Vec<T>,
    /// Least-squares slope of ln(curve) over the second half of the window.
    pub tail_slope: T,
    pub decaying: bool,
}

pub fn decay_diagnostic<T: Scalar>(sol: &PathSolution<T>, k_exp: T) -> Result<DecayReport<T>> {
    let n_paths = sol.x.n_paths();
    if n_paths < 100 {
        return Err(Error::DegenerateInput(format!("decay diagnostic needs ≥ 100 paths, got {n_paths}")));
    }
    let grid = sol.grid;
    let two = T::lit(2.0);
    let curve: Vec<T> = (0..grid.n_nodes())
        .map(|k| {
            let mut s = T::zero();
            for p in 0..n_paths {
                s += sol.x.at(p, k).iter().fold(T::zero(), |a, v| a + *v * *v);
            }
            s / T::from_count(n_paths) * (two * k_exp * grid.node(k)).exp()
        })
        .collect();
    let start = grid.n_nodes() / 2;
    let tail: Vec<(T, T)> = (start..grid.n_nodes())
        .filter(|&k| curve[k] > T::zero())
        .map(|k| (grid.node(k), curve[k].ln()))
        .collect();
    let (tail_slope, decaying) = if tail.len() < 2 {
        (T::zero(), curve[start..].iter().all(|v| *v == T::zero()))
    } else {
        let slope = ls_slope(&tail);
        (slope, slope < T::zero())
    };
    Ok(DecayReport { k: k_exp, curve, tail_slope, decaying })
}

pub(crate) fn ls_slope<T: Scalar>(pts: &[(T, T)]) -> T {
    let n = T::from_count(pts.len());
    let mx = pts.iter().fold(T::zero(), |a, p| a + p.0) / n;
    let my = pts.iter().fold(T::zero(), |a, p| a + p.1) / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (x, y) in pts {
        sxy += (*x - mx) * (*y - my);
        sxx += (*x - mx) * (*x - mx);
    }
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq)]
pub struct InequalityReport<T> {
    pub lhs: T,
    pub rhs: T,
    pub margin: T,
    pub pass: bool,
    /// Explicit fBm constant included on the right-hand side.
    pub c_fbm: T,
}

impl<T: Scalar> InequalityReport<T> {
    pub(crate) fn new(lhs: T, rhs: T, c_fbm: T) -> Self {
        let margin = rhs - lhs;
        let slack = T::lit(1e-12) * rhs.abs().max(T::one());
        Self { lhs, rhs, margin, pass: margin >= -slack, c_fbm }
    }
}

fn check_mu<T: Scalar>(c: &ForwardConstants<T>, mu: T) -> Result<T> {
    let upper = c.kappa_x - c.k - c.l_sigma_x * c.l_sigma_x * T::lit(0.5);
    if !(mu > T::zero() && mu < upper) {
        return Err(Error::InvalidParameter(format!(
            "μ = {} outside (0, {})",
            mu.as_f64(),
            upper.as_f64()
        )));
    }
    let two = T::lit(2.0);
    Ok(two * c.kappa_x - two * c.k - c.l_sigma_x * c.l_sigma_x - two * mu)
}

/// 2∫ e^{2Ks} ⟨|g|, ∫ φ_H |g|⟩ for a deterministic node path `g`.
pub(crate) fn fbm_constant<T: Scalar>(g: &[T], dim: usize, bundle: &DriverBundle<T>, k_exp: T) -> Result<T> {
    let abs: Vec<T> = g.iter().map(|v| v.abs()).collect();
    if abs.iter().all(|v| *v == T::zero()) {
        return Ok(T::zero());
    }
    weighted_history_integral(&abs, dim, bundle.hurst(), k_exp, &bundle.grid)
}

/// Trapezoidal E ∫ e^{2Ks} h(p, k) ds for a per-site nonnegative integrand.
fn discounted_expectation<T: Scalar>(
    bundle: &DriverBundle<T>,
    k_exp: T,
    h: impl Fn(usize, usize) -> T + Sync,
) -> T {
    let w = bundle.grid.discounted_weights(k_exp);
    let per: Vec<T> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| w.iter().enumerate().fold(T::zero(), |a, (k, wk)| a + *wk * h(p, k)))
        .collect();
    per.into_iter().fold(T::zero(), |a, v| a + v) / T::from_count(bundle.n_paths())
}

fn sq<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, x| a + *x * *x)
}

/// Single-spec a-priori estimate: coefficient·E∫|x e^{Ks}|² against the data terms plus C.
pub fn apriori_check<T: Scalar>(
    spec: &ForwardSpec<T>,
    sol: &PathSolution<T>,
    bundle: &DriverBundle<T>,
    mu: T,
) -> Result<InequalityReport<T>> {
    let cst = &spec.constants;
    let coef = check_mu(cst, mu)?;
    let grid = bundle.grid;
    let k_exp = cst.k;
    let lhs = coef * weighted_sq_integral(&sol.x, k_exp, &grid)?;
    let c = spec.coefficients;
    let n = c.dim();
    let d = c.noise_dim();
    let l2 = cst.l_sigma_x * cst.l_sigma_x;
    let zero = vec![T::zero(); n];
    let data = discounted_expectation(bundle, k_exp, |p, k| {
        let site = Site { t: grid.node(k), node: k, path: p, regime: bundle.regime(p, k) };
        let mut b = vec![T::zero(); n];
        let mut s = vec![T::zero(); n * d];
        c.drift(&site, &zero, &mut b);
        c.diffusion(&site, &zero, &mut s);
        sq(&b) / mu + (T::one() + l2 / mu) * sq(&s)
    });
    let x0 = (0..bundle.n_paths()).fold(T::zero(), |a, p| a + sq(spec.initial.of(p)))
        / T::from_count(bundle.n_paths())
        * (T::lit(2.0) * k_exp * grid.t0()).exp();
    let gamma = fbm_coefficient_path(c, &grid)?;
    let c_fbm = fbm_constant(&gamma, n, bundle, k_exp)?;
    Ok(InequalityReport::new(lhs, x0 + data + c_fbm, c_fbm))
}

/// Stability estimate between two specs solved on the same bundle.
pub fn apriori_stability<T: Scalar>(
    spec: &ForwardSpec<T>,
    sol: &PathSolution<T>,
    spec_bar: &ForwardSpec<T>,
    sol_bar: &PathSolution<T>,
    bundle: &DriverBundle<T>,
    mu: T,
) -> Result<InequalityReport<T>> {
    let cst = &spec.constants;
    let coef = check_mu(cst, mu)?;
    let grid = bundle.grid;
    let k_exp = cst.k;
    let diff = sol.x.difference(&sol_bar.x)?;
    let lhs = coef * weighted_sq_integral(&diff, k_exp, &grid)?;
    let (c, cb) = (spec.coefficients, spec_bar.coefficients);
    let n = c.dim();
    let d = c.noise_dim();
    let l2 = cst.l_sigma_x * cst.l_sigma_x;
    let data = discounted_expectation(bundle, k_exp, |p, k| {
        let site = Site { t: grid.node(k), node: k, path: p, regime: bundle.regime(p, k) };
        let xb = sol_bar.x.at(p, k);
        let (mut b, mut bb) = (vec![T::zero(); n], vec![T::zero(); n]);
        let (mut s, mut sb) = (vec![T::zero(); n * d], vec![T::zero(); n * d]);
        c.drift(&site, xb, &mut b);
        cb.drift(&site, xb, &mut bb);
        c.diffusion(&site, xb, &mut s);
        cb.diffusion(&site, xb, &mut sb);
        let db: Vec<T> = b.iter().zip(&bb).map(|(u, v)| *u - *v).collect();
        let ds: Vec<T> = s.iter().zip(&sb).map(|(u, v)| *u - *v).collect();
        sq(&db) / mu + (T::one() + l2 / mu) * sq(&ds)
    });
    let x0 = (0..bundle.n_paths()).fold(T::zero(), |a, p| {
        let u = spec.initial.of(p);
        let v = spec_bar.initial.of(p);
        a + u.iter().zip(v).fold(T::zero(), |s, (x, y)| s + (*x - *y) * (*x - *y))
    }) / T::from_count(bundle.n_paths())
        * (T::lit(2.0) * k_exp * grid.t0()).exp();
    let g = fbm_coefficient_path(c, &grid)?;
    let gb = fbm_coefficient_path(cb, &grid)?;
    let c_fbm = if g == gb {
        T::zero()
    } else {
        let dg: Vec<T> = g.iter().zip(&gb).map(|(u, v)| *u - *v).collect();
        fbm_constant(&dg, n, bundle, k_exp)?
    };
    Ok(InequalityReport::new(lhs, x0 + data + c_fbm, c_fbm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picard_factor_value() {
        let f = picard_factor(1.0, 1.0, 16.0);
        assert!((f - (1.0 - (-16.0f64).exp()) * 0.25).abs() < 1e-15);
    }

    #[test]
    fn slope_of_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 - 2.0 * i as f64)).collect();
        assert!((ls_slope(&pts) + 2.0).abs() < 1e-12);
    }
}
