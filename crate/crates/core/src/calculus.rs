//! Extended generator 𝓛 for the mixed Brownian / fractional / regime-switching
//! dynamics, and a pathwise residual of the corresponding Itô formula.

use rayon::prelude::*;

use crate::drivers::{DriverBundle, GeneratorMatrix};
use crate::error::{Error, Result};
use crate::forward::{fbm_coefficient_path, ls_slope, ForwardCoefficients, PathSolution, Site};
use crate::scalar::Scalar;
use crate::timegrid::{cell_pair_weights, Hurst, TimeGrid};

/// f(t, x, i₀) with its derivatives. `hessian` fills an `n × n` row-major matrix.
pub trait TestFunction<T: Scalar>: Sync {
    fn value(&self, t: T, x: &[T], regime: usize) -> T;
    fn time_derivative(&self, t: T, x: &[T], regime: usize) -> T;
    fn gradient(&self, t: T, x: &[T], regime: usize, out: &mut [T]);
    fn hessian(&self, t: T, x: &[T], regime: usize, out: &mut [T]);
}

type ScalarFn<'a, T> = Box<dyn Fn(T, &[T], usize) -> T + Send + Sync + 'a>;
type FillFn<'a, T> = Box<dyn Fn(T, &[T], usize, &mut [T]) + Send + Sync + 'a>;

pub struct FnTestFunction<'a, T> {
    value: ScalarFn<'a, T>,
    dt: ScalarFn<'a, T>,
    grad: FillFn<'a, T>,
    hess: FillFn<'a, T>,
}

impl<'a, T: Scalar> FnTestFunction<'a, T> {
    pub fn new(
        value: impl Fn(T, &[T], usize) -> T + Send + Sync + 'a,
        dt: impl Fn(T, &[T], usize) -> T + Send + Sync + 'a,
        grad: impl Fn(T, &[T], usize, &mut [T]) + Send + Sync + 'a,
        hess: impl Fn(T, &[T], usize, &mut [T]) + Send + Sync + 'a,
    ) -> Self {
        Self { value: Box::new(value), dt: Box::new(dt), grad: Box::new(grad), hess: Box::new(hess) }
    }

    /// f = x (scalar state).
    pub fn identity() -> Self {
        Self::new(|_, x, _| x[0], |_, _, _| T::zero(), |_, _, _, g| g[0] = T::one(), |_, _, _, h| h[0] = T::zero())
    }

    /// f = |x|².
    pub fn square_norm() -> Self {
        Self::new(
            |_, x, _| x.iter().fold(T::zero(), |a, v| a + *v * *v),
            |_, _, _| T::zero(),
            |_, x, _, g| {
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi = T::lit(2.0) * *xi;
                }
            },
            |_, x, _, h| {
                let n = x.len();
                h.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..n {
                    h[i * n + i] = T::lit(2.0);
                }
            },
        )
    }

    /// f = label of the regime (1-based), independent of t and x.
    pub fn regime_label() -> Self {
        Self::new(
            |_, _, i| T::from_count(i + 1),
            |_, _, _| T::zero(),
            |_, _, _, g| g.iter_mut().for_each(|v| *v = T::zero()),
            |_, _, _, h| h.iter_mut().for_each(|v| *v = T::zero()),
        )
    }
}

impl<T: Scalar> TestFunction<T> for FnTestFunction<'_, T> {
    fn value(&self, t: T, x: &[T], regime: usize) -> T {
        (self.value)(t, x, regime)
    }
    fn time_derivative(&self, t: T, x: &[T], regime: usize) -> T {
        (self.dt)(t, x, regime)
    }
    fn gradient(&self, t: T, x: &[T], regime: usize, out: &mut [T]) {
        (self.grad)(t, x, regime, out)
    }
    fn hessian(&self, t: T, x: &[T], regime: usize, out: &mut [T]) {
        (self.hess)(t, x, regime, out)
    }
}

/// Checks Hessian symmetry (1e−8) and the gradient against central differences
/// (1e−4 relative) at the given points.
pub fn check_test_function<T: Scalar>(
    tf: &dyn TestFunction<T>,
    points: &[(T, Vec<T>, usize)],
) -> Result<()> {
    for (t, x, i) in points {
        let n = x.len();
        let mut g = vec![T::zero(); n];
        let mut h = vec![T::zero(); n * n];
        tf.gradient(*t, x, *i, &mut g);
        tf.hessian(*t, x, *i, &mut h);
        for a in 0..n {
            for b in 0..a {
                if (h[a * n + b] - h[b * n + a]).abs() > T::lit(1e-8) {
                    return Err(Error::Consistency(format!("Hessian not symmetric at t = {}", t.as_f64())));
                }
            }
            let step = T::lit(1e-4) * x[a].abs().max(T::one());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += step;
            xm[a] -= step;
            let fd = (tf.value(*t, &xp, *i) - tf.value(*t, &xm, *i)) / (step + step);
            if (fd - g[a]).abs() > T::lit(1e-4) * g[a].abs().max(T::one()) {
                return Err(Error::Consistency(format!(
                    "gradient component {} disagrees with finite differences at t = {}",
                    a + 1,
                    t.as_f64()
                )));
            }
        }
    }
    Ok(())
}

/// Coefficients, chain generator and Hurst index entering 𝓛.
#[derive(Clone, Copy)]
pub struct GeneratorInputs<'a, T> {
    pub coefficients: &'a dyn ForwardCoefficients<T>,
    pub generator: &'a GeneratorMatrix<T>,
    pub hurst: Hurst<T>,
    /// History of γ is integrated from `grid.t0()`, cell by cell.
    pub grid: TimeGrid<T>,
}

impl<'a, T: Scalar> GeneratorInputs<'a, T> {
    /// c(t) = ∫_{t0}^t φ_H(t, u) γ(u) du with γ averaged over each cell.
    pub fn fbm_history(&self, t: T) -> Result<Vec<T>> {
        let g = &self.grid;
        if t < g.t0() || t > g.t_end() + g.dt() * T::lit(1e-9) {
            return Err(Error::Domain(format!(
                "t = {} outside [{}, {}]",
                t.as_f64(),
                g.t0().as_f64(),
                g.t_end().as_f64()
            )));
        }
        let n = self.coefficients.dim();
        let h = self.hurst.value();
        let e = T::lit(2.0) * h - T::one();
        let half = T::lit(0.5);
        let mut out = vec![T::zero(); n];
        let mut ga = vec![T::zero(); n];
        let mut gb = vec![T::zero(); n];
        let mut k = 0;
        while k < g.n_steps() && g.node(k) < t {
            let a = g.node(k);
            let b = g.node(k + 1).min(t);
            self.coefficients.fbm_coefficient(a, &mut ga);
            self.coefficients.fbm_coefficient(b, &mut gb);
            let w = h * ((t - a).powf(e) - (t - b).powf(e));
            for c in 0..n {
                out[c] += w * half * (ga[c] + gb[c]);
            }
            k += 1;
        }
        Ok(out)
    }

    /// A(t, x, i₀) = σσᵀ + γcᵀ + cγᵀ, `n × n` row-major.
    pub fn diffusion_matrix(&self, t: T, x: &[T], regime: usize) -> Result<Vec<T>> {
        let c = self.fbm_history(t)?;
        Ok(self.diffusion_matrix_with(t, x, regime, &c))
    }

    fn diffusion_matrix_with(&self, t: T, x: &[T], regime: usize, c: &[T]) -> Vec<T> {
        let n = self.coefficients.dim();
        let d = self.coefficients.noise_dim();
        let site = Site { t, node: self.grid.index_at_or_before(t), path: 0, regime };
        let mut s = vec![T::zero(); n * d];
        self.coefficients.diffusion(&site, x, &mut s);
        let mut gamma = vec![T::zero(); n];
        self.coefficients.fbm_coefficient(t, &mut gamma);
        let mut a = vec![T::zero(); n * n];
        for r in 0..n {
            for q in 0..n {
                let mut v = gamma[r] * c[q] + c[r] * gamma[q];
                for i in 0..d {
                    v += s[r * d + i] * s[q * d + i];
                }
                a[r * n + q] = v;
            }
        }
        a
    }
}

/// Σ_j q_{ij}[f(t,x,j) − f(t,x,i)].
pub fn jump_generator<T: Scalar>(tf: &dyn TestFunction<T>, q: &GeneratorMatrix<T>, t: T, x: &[T], i0: usize) -> T {
    let fi = tf.value(t, x, i0);
    let mut s = T::zero();
    for j in 0..q.m() {
        if j != i0 {
            let rate = q.rate(i0, j);
            if rate != T::zero() {
                s += rate * (tf.value(t, x, j) - fi);
            }
        }
    }
    s
}

/// ∂ₜf + bᵀ∇f + ½tr(∇²f·A), without the chain part.
pub fn continuous_generator<T: Scalar>(
    tf: &dyn TestFunction<T>,
    gi: &GeneratorInputs<T>,
    t: T,
    x: &[T],
    i0: usize,
) -> Result<T> {
    let c = gi.fbm_history(t)?;
    Ok(continuous_generator_with(tf, gi, t, x, i0, &c))
}

fn continuous_generator_with<T: Scalar>(
    tf: &dyn TestFunction<T>,
    gi: &GeneratorInputs<T>,
    t: T,
    x: &[T],
    i0: usize,
    history: &[T],
) -> T {
    let n = gi.coefficients.dim();
    let site = Site { t, node: gi.grid.index_at_or_before(t), path: 0, regime: i0 };
    let mut b = vec![T::zero(); n];
    gi.coefficients.drift(&site, x, &mut b);
    let mut g = vec![T::zero(); n];
    let mut h = vec![T::zero(); n * n];
    tf.gradient(t, x, i0, &mut g);
    tf.hessian(t, x, i0, &mut h);
    let a = gi.diffusion_matrix_with(t, x, i0, history);
    let mut v = tf.time_derivative(t, x, i0);
    for r in 0..n {
        v += b[r] * g[r];
    }
    let mut tr = T::zero();
    for r in 0..n {
        for q in 0..n {
            tr += h[r * n + q] * a[q * n + r];
        }
    }
    v + T::lit(0.5) * tr
}

/// 𝓛f(t, x, i₀).
pub fn generator_apply<T: Scalar>(
    tf: &dyn TestFunction<T>,
    gi: &GeneratorInputs<T>,
    t: T,
    x: &[T],
    i0: usize,
) -> Result<T> {
    if i0 >= gi.generator.m() {
        return Err(Error::Domain(format!("regime {} outside 1..={}", i0 + 1, gi.generator.m())));
    }
    Ok(continuous_generator(tf, gi, t, x, i0)? + jump_generator(tf, gi.generator, t, x, i0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats<T> {
    pub mean: T,
    pub std_error: T,
    pub rms: T,
    pub n_paths: usize,
}

impl<T: Scalar> ResidualStats<T> {
    pub fn from_samples(r: &[T]) -> Result<Self> {
        if r.len() < 2 {
            return Err(Error::DegenerateInput("need at least two samples".into()));
        }
        let n = T::from_count(r.len());
        let mean = r.iter().fold(T::zero(), |a, v| a + *v) / n;
        let ms = r.iter().fold(T::zero(), |a, v| a + *v * *v) / n;
        let var = r.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) / (n - T::one());
        Ok(Self { mean, std_error: (var / n).sqrt(), rms: ms.sqrt(), n_paths: r.len() })
    }

    /// |mean| ≤ z·SE.
    pub fn within(&self, z: T) -> bool {
        self.mean.abs() <= z * self.std_error
    }
}

/// Per-path residual of the Itô formula on `[t1, t2]`:
/// LHS minus f(t1) + ∫𝓛f ds + Σ∫⟨∇f,σ_i⟩dW_i + ∫⟨∇f,γ⟩dB^H + Σ∫[f(j)−f(i)]dM_{ij}.
///
/// Brownian and martingale integrals are left-point sums. The dB^H sum carries
/// the divergence correction −Σ_k γ_kᵀ∇²f(X_k) Σ_{j<k} γ̄_j ρ(k−j). The ds
/// integral of the continuous part is trapezoidal; the chain part uses exact
/// occupation times.
pub fn ito_residual_paths<T: Scalar>(
    tf: &dyn TestFunction<T>,
    gi: &GeneratorInputs<T>,
    bundle: &DriverBundle<T>,
    x_paths: &PathSolution<T>,
    window: (T, T),
) -> Result<Vec<T>> {
    let grid = bundle.grid;
    if !grid.matches(&x_paths.grid) || !grid.matches(&gi.grid) {
        return Err(Error::Consistency("paths, bundle and generator inputs use different grids".into()));
    }
    if x_paths.x.n_paths() != bundle.n_paths() {
        return Err(Error::Consistency("path count differs from the bundle".into()));
    }
    if bundle.generator.m() != gi.generator.m() {
        return Err(Error::Consistency("bundle and generator inputs disagree on the chain".into()));
    }
    let (k1, k2) = match (grid.node_index(window.0), grid.node_index(window.1)) {
        (Some(a), Some(b)) if a <= b => (a, b),
        _ => return Err(Error::Domain("residual window must run between grid nodes".into())),
    };
    let c = gi.coefficients;
    let n = c.dim();
    let d = c.noise_dim();
    let m = gi.generator.m();
    let dt = grid.dt();
    let half = T::lit(0.5);
    let gamma = fbm_coefficient_path(c, &grid)?;
    let has_fbm = gamma.iter().any(|v| *v != T::zero());
    let rho = cell_pair_weights(&grid, gi.hurst);
    let gamma_avg: Vec<T> = (0..grid.n_steps() * n)
        .map(|i| half * (gamma[i] + gamma[i + n]))
        .collect();
    // Φ_k = Σ_{j<k} γ̄_j ρ(k−j), history measured from the grid start.
    let mut phi = vec![T::zero(); grid.n_steps() * n];
    if has_fbm {
        for k in 0..grid.n_steps() {
            for j in 0..k {
                for r in 0..n {
                    phi[k * n + r] += gamma_avg[j * n + r] * rho[k - j];
                }
            }
        }
    }
    let history: Vec<Vec<T>> = (0..grid.n_nodes())
        .map(|k| gi.fbm_history(grid.node(k)))
        .collect::<Result<_>>()?;
    let out: Vec<Result<T>> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let x = |k: usize| x_paths.x.at(p, k);
            let mut g = vec![T::zero(); n];
            let mut h = vec![T::zero(); n * n];
            let mut s = vec![T::zero(); n * d];
            let lhs = tf.value(grid.node(k2), x(k2), bundle.regime(p, k2))
                - tf.value(grid.node(k1), x(k1), bundle.regime(p, k1));
            let mut rhs = T::zero();
            for k in k1..k2 {
                let t = grid.node(k);
                let i = bundle.regime(p, k);
                let xk = x(k);
                let l0 = continuous_generator_with(tf, gi, t, xk, i, &history[k]);
                let l1 = continuous_generator_with(tf, gi, grid.node(k + 1), x(k + 1), i, &history[k + 1]);
                rhs += half * (l0 + l1) * dt;
                let occ = bundle.martingales.occupation.at(p, k);
                for (state, o) in occ.iter().enumerate().take(m) {
                    if *o != T::zero() {
                        rhs += *o * jump_generator(tf, gi.generator, t, xk, state);
                    }
                }
                tf.gradient(t, xk, i, &mut g);
                let site = Site { t, node: k, path: p, regime: i };
                c.diffusion(&site, xk, &mut s);
                let dw = bundle.dw(p, k);
                for r in 0..n {
                    for (q, w) in dw.iter().enumerate() {
                        rhs += g[r] * s[r * d + q] * *w;
                    }
                }
                if has_fbm {
                    tf.hessian(t, xk, i, &mut h);
                    let db = bundle.dbh(p, k);
                    for r in 0..n {
                        rhs += g[r] * gamma[k * n + r] * db;
                        for q in 0..n {
                            rhs -= gamma[k * n + r] * h[r * n + q] * phi[k * n + q];
                        }
                    }
                }
                let dm = bundle.dm(p, k);
                for (idx, &(a, b)) in bundle.martingales.pairs.iter().enumerate() {
                    if dm[idx] != T::zero() {
                        rhs += (tf.value(t, xk, b) - tf.value(t, xk, a)) * dm[idx];
                    }
                }
            }
            Ok(lhs - rhs)
        })
        .collect();
    out.into_iter().collect()
}

pub fn ito_residual<T: Scalar>(
    tf: &dyn TestFunction<T>,
    gi: &GeneratorInputs<T>,
    bundle: &DriverBundle<T>,
    x_paths: &PathSolution<T>,
    window: (T, T),
) -> Result<ResidualStats<T>> {
    ResidualStats::from_samples(&ito_residual_paths(tf, gi, bundle, x_paths, window)?)
}

/// Least-squares slope of ln(value) against ln(step).
pub fn fit_order<T: Scalar>(steps: &[T], values: &[T]) -> Result<T> {
    if steps.len() != values.len() || steps.len() < 2 {
        return Err(Error::DegenerateInput("order fit needs at least two matched levels".into()));
    }
    if values.iter().chain(steps).any(|v| !(*v > T::zero())) {
        return Err(Error::DegenerateInput("order fit needs positive values".into()));
    }
    let pts: Vec<(T, T)> = steps.iter().zip(values).map(|(h, v)| (h.ln(), v.ln())).collect();
    Ok(ls_slope(&pts))
}
