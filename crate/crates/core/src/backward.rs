//! Infinite-horizon BSDE dy = g ds + Σ z_i dW_i + r dB^H + f·dℳ, solved by
//! truncation of the driver and a least-squares backward sweep.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rayon::prelude::*;

use crate::drivers::{substream, DriverBundle, StreamTag};
use crate::error::{Error, Result};
use crate::forward::{InequalityReport, Site};
use crate::paths::PathSet;
use crate::scalar::Scalar;
use crate::timegrid::{weighted_history_integral, weighted_sq_integral, TimeGrid};

/// g(s, y, z, r, f, i₀). `z` is `n × d` row-major, `f` is `n × P` row-major with
/// `P` the number of ordered regime pairs.
pub trait BackwardDriver<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, site: &Site<T>, y: &[T], z: &[T], r: &[T], f: &[T], out: &mut [T]);
}

type DriverFn<'a, T> = Box<dyn Fn(&Site<T>, &[T], &[T], &[T], &[T], &mut [T]) + Send + Sync + 'a>;

pub struct FnDriver<'a, T> {
    dim: usize,
    g: DriverFn<'a, T>,
}

impl<'a, T: Scalar> FnDriver<'a, T> {
    pub fn new(dim: usize, g: impl Fn(&Site<T>, &[T], &[T], &[T], &[T], &mut [T]) + Send + Sync + 'a) -> Self {
        Self { dim, g: Box::new(g) }
    }

    /// Scalar driver depending on `(t, y, regime)` only.
    pub fn scalar(g: impl Fn(T, T, usize) -> T + Send + Sync + 'a) -> Self {
        Self::new(1, move |s, y, _, _, _, out| out[0] = g(s.t, y[0], s.regime))
    }
}

impl<T: Scalar> BackwardDriver<T> for FnDriver<'_, T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, site: &Site<T>, y: &[T], z: &[T], r: &[T], f: &[T], out: &mut [T]) {
        (self.g)(site, y, z, r, f, out)
    }
}

/// g_n = 1_{[0,n]} g.
pub struct TruncatedDriver<'a, T> {
    inner: &'a dyn BackwardDriver<T>,
    horizon: T,
}

impl<T: Scalar> TruncatedDriver<'_, T> {
    pub fn horizon(&self) -> T {
        self.horizon
    }
}

impl<T: Scalar> BackwardDriver<T> for TruncatedDriver<'_, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, site: &Site<T>, y: &[T], z: &[T], r: &[T], f: &[T], out: &mut [T]) {
        let tol = T::lit(1e-12) * self.horizon.abs().max(T::one());
        if site.t <= self.horizon + tol {
            self.inner.eval(site, y, z, r, f, out)
        } else {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

pub fn truncate_driver<T: Scalar>(g: &dyn BackwardDriver<T>, n: T) -> Result<TruncatedDriver<'_, T>> {
    if !(n > T::zero()) {
        return Err(Error::InvalidParameter("truncation horizon must be positive".into()));
    }
    Ok(TruncatedDriver { inner: g, horizon: n })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardConstants<T> {
    pub l_gy: T,
    pub l_gz: T,
    pub l_gr: T,
    pub l_gf: T,
    /// Monotonicity constant L of the one-sided condition on ⟨y, g − g(·,0)⟩.
    pub l_mono: T,
    pub k: T,
}

impl<T: Scalar> BackwardConstants<T> {
    pub fn with_k(k: T) -> Self {
        Self { l_gy: T::zero(), l_gz: T::zero(), l_gr: T::zero(), l_gf: T::zero(), l_mono: T::zero(), k }
    }
}

pub struct BackwardSpec<'a, T> {
    pub driver: &'a dyn BackwardDriver<T>,
    pub constants: BackwardConstants<T>,
    /// State features for the regression basis, `n_paths × n_nodes × q`.
    pub features: Option<&'a PathSet<T>>,
}

#[derive(Clone, Debug)]
pub struct BackwardSolution<T> {
    pub grid: TimeGrid<T>,
    pub y: PathSet<T>,
    pub z: PathSet<T>,
    pub r: PathSet<T>,
    pub f: PathSet<T>,
    pub level: T,
}

impl<T: Scalar> BackwardSolution<T> {
    pub fn zeros(grid: &TimeGrid<T>, n_paths: usize, n: usize, d: usize, pairs: usize) -> Self {
        let nodes = grid.n_nodes();
        Self {
            grid: *grid,
            y: PathSet::zeros(n_paths, nodes, n),
            z: PathSet::zeros(n_paths, nodes, n * d),
            r: PathSet::zeros(n_paths, nodes, n),
            f: PathSet::zeros(n_paths, nodes, n * pairs),
            level: grid.t_end(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.y.all_finite() && self.z.all_finite() && self.r.all_finite() && self.f.all_finite()
    }

    /// `time,path_id,y…,z…,r…,f…`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.y.dim();
        let d = if n == 0 { 0 } else { self.z.dim() / n };
        let p = if n == 0 { 0 } else { self.f.dim() / n };
        write!(w, "time,path_id")?;
        for i in 1..=n {
            write!(w, ",y{i}")?;
        }
        for i in 1..=n {
            for j in 1..=d {
                write!(w, ",z{i}_{j}")?;
            }
        }
        for i in 1..=n {
            write!(w, ",r{i}")?;
        }
        for i in 1..=n {
            for j in 1..=p {
                write!(w, ",f{i}_{j}")?;
            }
        }
        writeln!(w)?;
        for path in 0..self.y.n_paths() {
            for k in 0..self.grid.n_nodes() {
                write!(w, "{},{}", self.grid.node(k).as_f64(), path)?;
                for set in [&self.y, &self.z, &self.r, &self.f] {
                    for v in set.at(path, k) {
                        write!(w, ",{}", v.as_f64())?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

const MAX_DEGREE: usize = 2;
const CLIP: f64 = 4.0;

/// Standard score clipped to ±4 so that isolated outliers cannot steer the fit.
fn standardize<T: Scalar>(v: T, mean: T, sd: T) -> T {
    let c = T::lit(CLIP);
    ((v - mean) / sd).max(-c).min(c)
}

/// Degree ≤ `degree` monomials of standardized features, intercept first.
fn monomials<T: Scalar>(u: &[T], degree: usize, out: &mut Vec<T>) {
    out.clear();
    out.push(T::one());
    if degree >= 1 {
        out.extend_from_slice(u);
    }
    if degree >= 2 {
        for a in 0..u.len() {
            for b in a..u.len() {
                out.push(u[a] * u[b]);
            }
        }
    }
}

fn n_monomials(q: usize, degree: usize) -> usize {
    match degree {
        0 => 1,
        1 => 1 + q,
        _ => 1 + q + q * (q + 1) / 2,
    }
}

/// Whether the values cluster into at most `limit` groups at resolution 1e-8·sd.
fn distinct_at_most<T: Scalar>(values: impl Iterator<Item = T>, sd: T, limit: usize) -> bool {
    let mut v: Vec<T> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let gap = sd * T::lit(1e-8);
    let groups = 1 + v.windows(2).filter(|w| w[1] - w[0] > gap).count();
    groups <= limit
}

/// Column layout of one regression cell: block sizes are prefixes of the basis.
struct Design {
    basis: usize,
    d: usize,
    /// `(pair index, block size)` for the ΔM blocks present.
    pairs: Vec<(usize, usize)>,
    with_increments: bool,
}

impl Design {
    fn sizes(&self) -> Vec<usize> {
        let mut out = vec![self.basis];
        if self.with_increments {
            out.extend(std::iter::repeat(self.basis).take(self.d + 1));
            out.extend(self.pairs.iter().map(|(_, s)| *s));
        }
        out
    }
    fn cols(&self) -> usize {
        self.sizes().iter().sum()
    }
}

struct StepContext<'a, T: Scalar> {
    bundle: &'a DriverBundle<T>,
    features: Option<&'a PathSet<T>>,
    target: &'a PathSet<T>,
    n: usize,
    k: usize,
}

/// Conditional expectation and integrands for the paths of one regime cell.
/// Returns `(path, E, z, r, f)` rows.
#[allow(clippy::type_complexity)]
fn regress_cell<T: Scalar>(
    ctx: &StepContext<T>,
    regime: usize,
    paths: &[usize],
) -> Result<Vec<(usize, Vec<T>, Vec<T>, Vec<T>, Vec<T>)>> {
    let bundle = ctx.bundle;
    let k = ctx.k;
    let n = ctx.n;
    let d = bundle.brownian_dim();
    let n_pairs = bundle.n_pairs();
    let count = paths.len();
    let cnt = T::from_count(count);

    // Standardized non-degenerate features.
    let (q_all, mut mean, mut sd) = match ctx.features {
        Some(f) => (f.dim(), vec![T::zero(); f.dim()], vec![T::zero(); f.dim()]),
        None => (0, Vec::new(), Vec::new()),
    };
    if let Some(f) = ctx.features {
        for &p in paths {
            for (c, v) in f.at(p, k).iter().enumerate() {
                mean[c] += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for &p in paths {
            for (c, v) in f.at(p, k).iter().enumerate() {
                sd[c] += (*v - mean[c]) * (*v - mean[c]);
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / cnt).sqrt());
    }
    let keep: Vec<usize> = (0..q_all)
        .filter(|&c| sd[c] > T::lit(1e-10) * (T::one() + mean[c].abs()))
        .collect();
    let q = keep.len();
    // A feature with only two distinct values makes its square collinear.
    let max_degree = match ctx.features {
        Some(f) if keep.iter().any(|&c| distinct_at_most(paths.iter().map(|&p| f.get(p, k, c)), sd[c], 2)) => 1,
        _ => MAX_DEGREE,
    };

    // ΔM columns only for pairs leaving this regime that jumped somewhere in the cell.
    let jumps: Vec<(usize, usize)> = bundle
        .martingales
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| i == regime && bundle.generator.rate(i, j) > T::zero())
        .map(|(idx, _)| {
            let c = paths.iter().filter(|&&p| bundle.martingales.counts.get(p, k, idx) > T::zero()).count();
            (idx, c)
        })
        .filter(|(_, c)| *c > 0)
        .collect();

    let mut design = None;
    for degree in (0..=max_degree).rev() {
        let basis = n_monomials(q, degree);
        let pairs = jumps.iter().map(|&(idx, c)| (idx, if c >= 3 * basis { basis } else { 1 })).collect();
        let cand = Design { basis, d, pairs, with_increments: true };
        if count >= 3 * cand.cols() {
            design = Some((cand, degree));
            break;
        }
    }
    let (design, degree) =
        design.unwrap_or((Design { basis: 1, d, pairs: Vec::new(), with_increments: false }, 0));

    let cols = design.cols();
    let mut x = DMatrix::<T>::zeros(count, cols);
    let mut yv = DMatrix::<T>::zeros(count, n);
    let mut phi = Vec::with_capacity(design.basis);
    let mut u = vec![T::zero(); q];
    for (row, &p) in paths.iter().enumerate() {
        if let Some(f) = ctx.features {
            let v = f.at(p, k);
            for (slot, &c) in keep.iter().enumerate() {
                u[slot] = standardize(v[c], mean[c], sd[c]);
            }
        }
        monomials(&u, degree, &mut phi);
        let mut col = 0;
        let mut push_block = |x: &mut DMatrix<T>, scale: T, size: usize| {
            for b in &phi[..size] {
                x[(row, col)] = *b * scale;
                col += 1;
            }
        };
        let b = design.basis;
        push_block(&mut x, T::one(), b);
        if design.with_increments {
            for w in bundle.dw(p, k) {
                push_block(&mut x, *w, b);
            }
            push_block(&mut x, bundle.dbh(p, k), b);
            let dm = bundle.dm(p, k);
            for &(idx, size) in &design.pairs {
                push_block(&mut x, dm[idx], size);
            }
        }
        for c in 0..n {
            yv[(row, c)] = ctx.target.get(p, k + 1, c);
        }
    }

    // Column RMS scaling.
    let mut scale = vec![T::zero(); cols];
    for (c, s) in scale.iter_mut().enumerate() {
        let ss = x.column(c).iter().fold(T::zero(), |a, v| a + *v * *v) / cnt;
        *s = ss.sqrt();
    }
    if let Some(c) = scale.iter().position(|s| *s == T::zero()) {
        return Err(Error::Conditioning(format!(
            "regression at step {k} (t = {}), regime {}: design column {c} vanishes",
            bundle.grid.node(k).as_f64(),
            regime + 1
        )));
    }
    for c in 0..cols {
        let s = scale[c];
        x.column_mut(c).iter_mut().for_each(|v| *v /= s);
    }
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * &yv;
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::Conditioning(format!(
            "regression at step {k} (t = {}), regime {}: design matrix is rank-deficient",
            bundle.grid.node(k).as_f64(),
            regime + 1
        ))
    })?;
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (T::max_value().unwrap(), T::zero());
    for i in 0..cols {
        let v = l[(i, i)] * l[(i, i)];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo <= hi * T::default_epsilon() * T::lit(1e4) {
        return Err(Error::Conditioning(format!(
            "regression at step {k} (t = {}), regime {}: design matrix is rank-deficient (pivot ratio {:.2e})",
            bundle.grid.node(k).as_f64(),
            regime + 1,
            (lo / hi).as_f64()
        )));
    }
    let mut beta = chol.solve(&rhs);
    for c in 0..cols {
        let s = scale[c];
        beta.row_mut(c).iter_mut().for_each(|v| *v /= s);
    }

    let sizes = design.sizes();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for &p in paths {
        if let Some(f) = ctx.features {
            let v = f.at(p, k);
            for (slot, &c) in keep.iter().enumerate() {
                u[slot] = standardize(v[c], mean[c], sd[c]);
            }
        }
        monomials(&u, degree, &mut phi);
        let block = |blk: usize, c: usize| {
            let mut s = T::zero();
            for (i, v) in phi[..sizes[blk]].iter().enumerate() {
                s += *v * beta[(offsets[blk] + i, c)];
            }
            s
        };
        let e: Vec<T> = (0..n).map(|c| block(0, c)).collect();
        let mut z = vec![T::zero(); n * d];
        let mut r = vec![T::zero(); n];
        let mut f = vec![T::zero(); n * n_pairs];
        if design.with_increments {
            for c in 0..n {
                for j in 0..d {
                    z[c * d + j] = block(1 + j, c);
                }
                r[c] = block(1 + d, c);
                for (slot, &(idx, _)) in design.pairs.iter().enumerate() {
                    f[c * n_pairs + idx] = block(2 + d + slot, c);
                }
            }
        }
        out.push((p, e, z, r, f));
    }
    Ok(out)
}

/// Backward sweep from y(t_end) = 0 over the whole bundle grid.
pub fn solve_backward<T: Scalar>(spec: &BackwardSpec<T>, bundle: &DriverBundle<T>) -> Result<BackwardSolution<T>> {
    let grid = bundle.grid;
    let n = spec.driver.dim();
    let d = bundle.brownian_dim();
    let n_pairs = bundle.n_pairs();
    let n_paths = bundle.n_paths();
    if let Some(f) = spec.features {
        if f.n_paths() != n_paths || f.n_nodes() != grid.n_nodes() {
            return Err(Error::Consistency("regression features do not match the bundle".into()));
        }
    }
    let mut sol = BackwardSolution::zeros(&grid, n_paths, n, d, n_pairs);
    let dt = grid.dt();
    for k in (0..grid.n_steps()).rev() {
        let mut cells: Vec<Vec<usize>> = vec![Vec::new(); bundle.m()];
        for p in 0..n_paths {
            cells[bundle.regime(p, k)].push(p);
        }
        let ctx = StepContext { bundle, features: spec.features, target: &sol.y, n, k };
        let fits: Vec<_> = cells
            .par_iter()
            .enumerate()
            .filter(|(_, c)| !c.is_empty())
            .map(|(regime, paths)| regress_cell(&ctx, regime, paths))
            .collect::<Result<Vec<_>>>()?;
        let t = grid.node(k);
        let rows: Vec<(usize, Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = fits
            .into_par_iter()
            .flatten()
            .map(|(p, e, z, r, f)| {
                let site = Site { t, node: k, path: p, regime: bundle.regime(p, k) };
                let mut g = vec![T::zero(); n];
                spec.driver.eval(&site, &e, &z, &r, &f, &mut g);
                let y0: Vec<T> = e.iter().zip(&g).map(|(a, b)| *a - *b * dt).collect();
                spec.driver.eval(&site, &y0, &z, &r, &f, &mut g);
                let y: Vec<T> = e.iter().zip(&g).map(|(a, b)| *a - *b * dt).collect();
                (p, y, z, r, f)
            })
            .collect();
        for (p, y, z, r, f) in rows {
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::Coefficient {
                    name: "g",
                    t: t.as_f64(),
                    regime: bundle.regime(p, k),
                    x: y.iter().map(|v| v.as_f64()).collect(),
                });
            }
            sol.y.at_mut(p, k).copy_from_slice(&y);
            sol.z.at_mut(p, k).copy_from_slice(&z);
            sol.r.at_mut(p, k).copy_from_slice(&r);
            sol.f.at_mut(p, k).copy_from_slice(&f);
        }
    }
    Ok(sol)
}

/// Solves with the truncated driver g_n.
pub fn solve_truncated<T: Scalar>(
    spec: &BackwardSpec<T>,
    bundle: &DriverBundle<T>,
    n: T,
) -> Result<BackwardSolution<T>> {
    if bundle.grid.t_end() < n - bundle.grid.dt() * T::lit(1e-9) {
        return Err(Error::Consistency(format!(
            "bundle ends at {} before truncation level {}",
            bundle.grid.t_end().as_f64(),
            n.as_f64()
        )));
    }
    let g = truncate_driver(spec.driver, n)?;
    let truncated = BackwardSpec { driver: &g, constants: spec.constants, features: spec.features };
    let mut sol = solve_backward(&truncated, bundle)?;
    sol.level = n;
    Ok(sol)
}

/// Weighted distance {E∫|Δy e^{Ks}|²}^{1/2} between two solutions.
pub fn level_distance<T: Scalar>(a: &BackwardSolution<T>, b: &BackwardSolution<T>, k: T) -> Result<T> {
    Ok(weighted_sq_integral(&a.y.difference(&b.y)?, k, &a.grid)?.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CauchyReport<T> {
    pub levels: Vec<T>,
    /// Distance between levels `i` and `i + 1`.
    pub distances: Vec<T>,
    pub converged: bool,
}

/// Solves at successive truncation levels on one bundle reaching the last level.
pub fn solve_infinite<T: Scalar>(
    spec: &BackwardSpec<T>,
    bundle: &DriverBundle<T>,
    tol: T,
    schedule: &[T],
) -> Result<(BackwardSolution<T>, CauchyReport<T>)> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("truncation schedule must be non-empty and increasing".into()));
    }
    let k = spec.constants.k;
    let mut prev = solve_truncated(spec, bundle, schedule[0])?;
    let mut report = CauchyReport { levels: vec![schedule[0]], distances: Vec::new(), converged: false };
    for &level in &schedule[1..] {
        let next = solve_truncated(spec, bundle, level)?;
        let dist = level_distance(&next, &prev, k)?;
        report.levels.push(level);
        report.distances.push(dist);
        prev = next;
        if dist < tol {
            report.converged = true;
            break;
        }
        let m = report.distances.len();
        if m >= 3 && report.distances[m - 3] <= report.distances[m - 2] && report.distances[m - 2] <= report.distances[m - 1] {
            return Err(Error::NonConvergence(format!(
                "level distances {:?} did not decrease",
                report.distances.iter().map(|v| v.as_f64()).collect::<Vec<_>>()
            )));
        }
    }
    Ok((prev, report))
}

/// Max deviation of `g` from affinity, g(λa + (1−λ)b) − λg(a) − (1−λ)g(b), at random points.
pub fn affine_defect<T: Scalar>(
    driver: &dyn BackwardDriver<T>,
    grid: &TimeGrid<T>,
    m: usize,
    d: usize,
    n_pairs: usize,
    samples: usize,
    seed: u64,
) -> T {
    let n = driver.dim();
    let len = n + n * d + n + n * n_pairs;
    let mut worst = T::zero();
    for s in 0..samples {
        let mut rng = substream(seed, StreamTag::Probe, s as u64);
        let node = rng.gen_range(0..grid.n_nodes());
        let site = Site { t: grid.node(node), node, path: 0, regime: rng.gen_range(0..m.max(1)) };
        let a: Vec<T> = (0..len).map(|_| T::lit(rng.gen_range(-2.0..2.0))).collect();
        let b: Vec<T> = (0..len).map(|_| T::lit(rng.gen_range(-2.0..2.0))).collect();
        let lam = T::lit(rng.gen::<f64>());
        let mix: Vec<T> = a.iter().zip(&b).map(|(u, v)| lam * *u + (T::one() - lam) * *v).collect();
        let eval = |v: &[T]| {
            let mut out = vec![T::zero(); n];
            let (y, rest) = v.split_at(n);
            let (z, rest) = rest.split_at(n * d);
            let (r, f) = rest.split_at(n);
            driver.eval(&site, y, z, r, f, &mut out);
            out
        };
        let (ga, gb, gm) = (eval(&a), eval(&b), eval(&mix));
        for c in 0..n {
            worst = worst.max((gm[c] - lam * ga[c] - (T::one() - lam) * gb[c]).abs());
        }
    }
    worst
}

/// Verifies a declared-linear driver against its affinity within 1e−10.
pub fn check_linear<T: Scalar>(
    driver: &dyn BackwardDriver<T>,
    grid: &TimeGrid<T>,
    m: usize,
    d: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<()> {
    let defect = affine_defect(driver, grid, m, d, n_pairs, 64, seed);
    if defect > T::lit(1e-10) {
        return Err(Error::Assumption(format!("driver declared linear deviates by {:.3e}", defect.as_f64())));
    }
    Ok(())
}

fn check_lemma_params<T: Scalar>(c: &BackwardConstants<T>, mu: T) -> Result<()> {
    let bound = (T::lit(0.5)).min(c.k - mu * T::lit(0.5));
    if !(mu > T::zero()) || !(c.l_mono > T::zero() && c.l_mono < bound) {
        return Err(Error::InvalidParameter(format!(
            "need μ > 0 and 0 < L < min(1/2, K − μ/2); got μ = {}, L = {}, K = {}",
            mu.as_f64(),
            c.l_mono.as_f64(),
            c.k.as_f64()
        )));
    }
    Ok(())
}

fn sq<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, x| a + *x * *x)
}

/// E|y(t0)e^{Kt0}|² + E∫[(2K−2L−μ)|y|² + (1−2L)|z|² + 2L|f|² + 2L|r|²]e^{2Ks}.
fn estimate_lhs<T: Scalar>(
    y: &PathSet<T>,
    z: &PathSet<T>,
    r: &PathSet<T>,
    f: &PathSet<T>,
    c: &BackwardConstants<T>,
    mu: T,
    grid: &TimeGrid<T>,
) -> Result<T> {
    let two = T::lit(2.0);
    let k = c.k;
    let l = c.l_mono;
    let n_paths = y.n_paths();
    let y0 = (0..n_paths).fold(T::zero(), |a, p| a + sq(y.at(p, 0))) / T::from_count(n_paths)
        * (two * k * grid.t0()).exp();
    Ok(y0
        + (two * k - two * l - mu) * weighted_sq_integral(y, k, grid)?
        + (T::one() - two * l) * weighted_sq_integral(z, k, grid)?
        + two * l * weighted_sq_integral(f, k, grid)?
        + two * l * weighted_sq_integral(r, k, grid)?)
}

/// Per-path fBm constant from the extracted r, averaged over the ensemble.
fn r_constant<T: Scalar>(r: &PathSet<T>, bundle: &DriverBundle<T>, k: T) -> Result<T> {
    let n = r.dim();
    let per: Vec<Result<T>> = (0..r.n_paths())
        .into_par_iter()
        .map(|p| {
            let abs: Vec<T> = r.path(p).iter().map(|v| v.abs()).collect();
            if abs.iter().all(|v| *v == T::zero()) {
                Ok(T::zero())
            } else {
                weighted_history_integral(&abs, n, bundle.hurst(), k, &bundle.grid)
            }
        })
        .collect();
    let mut s = T::zero();
    for v in per {
        s += v?;
    }
    Ok(s / T::from_count(r.n_paths()))
}

/// Single-spec estimate against (1/μ)E∫|g(s,0,0,0,0)e^{Ks}|² + C.
pub fn bsde_estimate_check<T: Scalar>(
    spec: &BackwardSpec<T>,
    sol: &BackwardSolution<T>,
    bundle: &DriverBundle<T>,
    mu: T,
) -> Result<InequalityReport<T>> {
    let c = &spec.constants;
    check_lemma_params(c, mu)?;
    let grid = bundle.grid;
    let lhs = estimate_lhs(&sol.y, &sol.z, &sol.r, &sol.f, c, mu, &grid)?;
    let n = spec.driver.dim();
    let d = bundle.brownian_dim();
    let np = bundle.n_pairs();
    let w = grid.discounted_weights(c.k);
    let per: Vec<T> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let (y, z, r, f) = (vec![T::zero(); n], vec![T::zero(); n * d], vec![T::zero(); n], vec![T::zero(); n * np]);
            let mut g = vec![T::zero(); n];
            let mut s = T::zero();
            for (k, wk) in w.iter().enumerate() {
                let site = Site { t: grid.node(k), node: k, path: p, regime: bundle.regime(p, k) };
                spec.driver.eval(&site, &y, &z, &r, &f, &mut g);
                s += *wk * sq(&g);
            }
            s
        })
        .collect();
    let data = per.into_iter().fold(T::zero(), |a, v| a + v) / T::from_count(bundle.n_paths()) / mu;
    let c_fbm = r_constant(&sol.r, bundle, c.k)?;
    Ok(InequalityReport::new(lhs, data + c_fbm, c_fbm))
}

/// Stability estimate between two drivers solved on the same bundle.
pub fn bsde_stability_check<T: Scalar>(
    spec: &BackwardSpec<T>,
    sol: &BackwardSolution<T>,
    spec_bar: &BackwardSpec<T>,
    sol_bar: &BackwardSolution<T>,
    bundle: &DriverBundle<T>,
    mu: T,
) -> Result<InequalityReport<T>> {
    let c = &spec.constants;
    check_lemma_params(c, mu)?;
    let grid = bundle.grid;
    let lhs = estimate_lhs(
        &sol.y.difference(&sol_bar.y)?,
        &sol.z.difference(&sol_bar.z)?,
        &sol.r.difference(&sol_bar.r)?,
        &sol.f.difference(&sol_bar.f)?,
        c,
        mu,
        &grid,
    )?;
    let n = spec.driver.dim();
    let w = grid.discounted_weights(c.k);
    let per: Vec<T> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut g = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            let mut s = T::zero();
            for (k, wk) in w.iter().enumerate() {
                let site = Site { t: grid.node(k), node: k, path: p, regime: bundle.regime(p, k) };
                let args = (sol_bar.y.at(p, k), sol_bar.z.at(p, k), sol_bar.r.at(p, k), sol_bar.f.at(p, k));
                spec.driver.eval(&site, args.0, args.1, args.2, args.3, &mut g);
                spec_bar.driver.eval(&site, args.0, args.1, args.2, args.3, &mut gb);
                s += *wk * g.iter().zip(&gb).fold(T::zero(), |a, (u, v)| a + (*u - *v) * (*u - *v));
            }
            s
        })
        .collect();
    let rhs = per.into_iter().fold(T::zero(), |a, v| a + v) / T::from_count(bundle.n_paths()) / mu;
    Ok(InequalityReport::new(lhs, rhs, T::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_is_closed_on_the_right() {
        let g = FnDriver::<f64>::scalar(|_, _, _| 1.0);
        let gn = truncate_driver(&g, 2.0).unwrap();
        let mut out = [0.0];
        for (t, want) in [(1.0, 1.0), (2.0, 1.0), (3.0, 0.0)] {
            gn.eval(&Site::at(t, 0), &[0.0], &[0.0], &[0.0], &[], &mut out);
            assert_eq!(out[0], want);
        }
        assert!(truncate_driver(&g, 0.0).is_err());
    }

    #[test]
    fn monomial_count() {
        let mut out = Vec::new();
        monomials(&[1.0, 2.0], 2, &mut out);
        assert_eq!(out, vec![1.0, 1.0, 2.0, 1.0, 2.0, 4.0]);
        assert_eq!(n_monomials(2, 2), 6);
    }
}
