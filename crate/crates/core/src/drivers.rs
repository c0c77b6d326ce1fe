//! The three independent noise sources: Brownian motion, fractional Brownian
//! motion and a continuous-time Markov chain, plus the compensated jump
//! martingales M_{ij} of the chain.
//!
//! Regimes are zero-based inside the library (`0..m`). Text output adds one so
//! that dumps read in the 1-based labels of the state space 𝕊 = {1, …, m}.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::paths::PathSet;
use crate::scalar::Scalar;
use crate::timegrid::{Hurst, TimeGrid};

/// Tags separating the random substreams derived from one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Brownian = 1,
    Fbm = 2,
    Regime = 3,
    InitialState = 4,
    Probe = 5,
    Perturbation = 6,
}

/// Counter-based substream: the ChaCha key comes from the root seed, the
/// stream id from `(tag, index)`. Streams never overlap.
pub fn substream(root: u64, tag: StreamTag, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((tag as u64) << 48) | (index & ((1u64 << 48) - 1)));
    rng
}

pub(crate) fn normal<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorMatrix<T> {
    m: usize,
    q: Vec<T>,
}

impl<T: Scalar> GeneratorMatrix<T> {
    pub fn new(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::InvalidGenerator("empty state space".into()));
        }
        let mut q = Vec::with_capacity(m * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidGenerator(format!("row {} has {} entries, expected {m}", i + 1, row.len())));
            }
            let mut sum = T::zero();
            let mut scale = T::one();
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidGenerator(format!("entry ({}, {}) not finite", i + 1, j + 1)));
                }
                if i != j && *v < T::zero() {
                    return Err(Error::InvalidGenerator(format!(
                        "negative rate {} at ({}, {})",
                        v.as_f64(),
                        i + 1,
                        j + 1
                    )));
                }
                sum += *v;
                scale = scale.max(v.abs());
            }
            let tol = T::lit(1e-12).max(T::lit(16.0) * T::default_epsilon()) * scale;
            if sum.abs() > tol {
                return Err(Error::InvalidGenerator(format!("row {} sums to {}", i + 1, sum.as_f64())));
            }
            q.extend_from_slice(row);
        }
        Ok(Self { m, q })
    }

    /// The single absorbing state.
    pub fn trivial() -> Self {
        Self { m: 1, q: vec![T::zero()] }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rate(&self, i: usize, j: usize) -> T {
        self.q[i * self.m + j]
    }

    pub fn exit_rate(&self, i: usize) -> T {
        -self.rate(i, i)
    }

    /// Ordered pairs `(i, j)`, `i ≠ j`, in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.m * (self.m.saturating_sub(1)));
        for i in 0..self.m {
            for j in 0..self.m {
                if i != j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn n_pairs(&self) -> usize {
        self.m * (self.m - 1)
    }

    /// Position of `(i, j)` in [`GeneratorMatrix::pairs`].
    pub fn pair_index(&self, i: usize, j: usize) -> Result<usize> {
        if i == j || i >= self.m || j >= self.m {
            return Err(Error::InvalidPair(i, j));
        }
        Ok(i * (self.m - 1) + if j > i { j - 1 } else { j })
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.q.chunks(self.m).map(|r| r.to_vec()).collect()
    }
}

/// Validating constructor named after the scenario operation.
pub fn validate_generator<T: Scalar>(rows: &[Vec<T>]) -> Result<GeneratorMatrix<T>> {
    GeneratorMatrix::new(rows)
}

/// Brownian increments, `n_paths × n_steps × d`.
#[derive(Clone, Debug)]
pub struct BrownianIncrements<T> {
    pub grid: TimeGrid<T>,
    pub increments: PathSet<T>,
}

impl<T: Scalar> BrownianIncrements<T> {
    pub fn dim(&self) -> usize {
        self.increments.dim()
    }
}

pub fn simulate_brownian<T: Scalar>(
    grid: &TimeGrid<T>,
    d: usize,
    n_paths: usize,
    seed: u64,
) -> Result<BrownianIncrements<T>> {
    if n_paths == 0 {
        return Err(Error::DegenerateInput("no paths requested".into()));
    }
    let sd = grid.dt().sqrt();
    let mut increments = PathSet::zeros(n_paths, grid.n_steps(), d);
    increments.par_fill(|p, chunk| {
        let mut rng = substream(seed, StreamTag::Brownian, p as u64);
        for v in chunk.iter_mut() {
            *v = sd * normal::<T>(&mut rng);
        }
    });
    Ok(BrownianIncrements { grid: *grid, increments })
}

/// Exact fBm sampler on the grid nodes by Cholesky factorisation of the node covariance.
#[derive(Clone, Debug)]
pub struct FbmSampler<T> {
    grid: TimeGrid<T>,
    hurst: Hurst<T>,
    /// Packed lower-triangular factor, row `i` at offset `i(i+1)/2`.
    factor: Vec<T>,
}

impl<T: Scalar> FbmSampler<T> {
    pub fn new(grid: &TimeGrid<T>, hurst: Hurst<T>) -> Result<Self> {
        Self::with_jitter(grid, hurst, T::zero())
    }

    pub fn with_jitter(grid: &TimeGrid<T>, hurst: Hurst<T>, jitter: T) -> Result<Self> {
        let n = grid.n_steps();
        let a = T::lit(2.0) * hurst.value();
        let half = T::lit(0.5);
        let tau: Vec<T> = (1..=n).map(|k| grid.node(k) - grid.t0()).collect();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let c = half * (tau[i].powf(a) + tau[j].powf(a) - (tau[i] - tau[j]).abs().powf(a));
            if i == j {
                c + jitter
            } else {
                c
            }
        });
        let max_diag = tau[n - 1].powf(a);
        let chol = cov.cholesky().ok_or_else(|| {
            let suggestion = max_diag * T::lit(1e3) * T::default_epsilon();
            Error::Conditioning(format!(
                "fBm covariance on {n} nodes (H = {}) is not numerically positive definite; \
                 retry with a diagonal jitter of about {:.3e} or a coarser grid",
                hurst.value().as_f64(),
                suggestion.as_f64()
            ))
        })?;
        let l = chol.l();
        let mut factor = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                factor.push(l[(i, j)]);
            }
        }
        Ok(Self { grid: *grid, hurst, factor })
    }

    pub fn hurst(&self) -> Hurst<T> {
        self.hurst
    }

    /// Node values `n_paths × n_nodes × 1`, pinned to zero at the first node.
    pub fn sample(&self, n_paths: usize, seed: u64) -> Result<PathSet<T>> {
        if n_paths == 0 {
            return Err(Error::DegenerateInput("no paths requested".into()));
        }
        let n = self.grid.n_steps();
        let mut values = PathSet::zeros(n_paths, n + 1, 1);
        values.par_fill(|p, path| {
            let mut rng = substream(seed, StreamTag::Fbm, p as u64);
            let z: Vec<T> = (0..n).map(|_| normal::<T>(&mut rng)).collect();
            path[0] = T::zero();
            for i in 0..n {
                let row = &self.factor[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
                let mut s = T::zero();
                for (l, zj) in row.iter().zip(&z) {
                    s += *l * *zj;
                }
                path[i + 1] = s;
            }
        });
        Ok(values)
    }
}

/// fBm node values, `n_paths × n_nodes × 1`.
#[derive(Clone, Debug)]
pub struct FbmPaths<T> {
    pub grid: TimeGrid<T>,
    pub hurst: Hurst<T>,
    pub values: PathSet<T>,
}

impl<T: Scalar> FbmPaths<T> {
    #[inline]
    pub fn value(&self, p: usize, k: usize) -> T {
        self.values.get(p, k, 0)
    }

    #[inline]
    pub fn increment(&self, p: usize, k: usize) -> T {
        self.values.get(p, k + 1, 0) - self.values.get(p, k, 0)
    }
}

pub fn simulate_fbm<T: Scalar>(
    grid: &TimeGrid<T>,
    hurst: Hurst<T>,
    n_paths: usize,
    seed: u64,
) -> Result<FbmPaths<T>> {
    let values = FbmSampler::new(grid, hurst)?.sample(n_paths, seed)?;
    Ok(FbmPaths { grid: *grid, hurst, values })
}

/// Cov(B^H(t), B^H(u)) = ½(t^{2H} + u^{2H} − |t−u|^{2H}), times measured from the pinned origin.
pub fn fbm_covariance<T: Scalar>(t: T, u: T, hurst: Hurst<T>) -> T {
    let e = T::lit(2.0) * hurst.value();
    let p = |v: T| if v == T::zero() { T::zero() } else { v.abs().powf(e) };
    T::lit(0.5) * (p(t) + p(u) - p(t - u))
}

/// Empirical against exact covariance of the fBm values at two nodes.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CovarianceEntry {
    pub t: f64,
    pub u: f64,
    pub empirical: f64,
    pub exact: f64,
    pub std_error: f64,
}

impl CovarianceEntry {
    pub fn z_score(&self) -> f64 {
        if self.std_error > 0.0 {
            (self.empirical - self.exact).abs() / self.std_error
        } else if self.empirical == self.exact {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Sample second moments E[B^H(t)B^H(u)] for every pair `t ≤ u` of the given node times.
pub fn fbm_covariance_table<T: Scalar>(fbm: &FbmPaths<T>, times: &[T]) -> Result<Vec<CovarianceEntry>> {
    let n = fbm.values.n_paths();
    if n < 2 {
        return Err(Error::DegenerateInput("covariance table needs at least two paths".into()));
    }
    let idx: Vec<usize> = times
        .iter()
        .map(|t| {
            fbm.grid
                .node_index(*t)
                .ok_or_else(|| Error::Domain(format!("t = {} is not a grid node", t.as_f64())))
        })
        .collect::<Result<_>>()?;
    let origin = fbm.grid.t0();
    let mut out = Vec::new();
    for (a, &ka) in idx.iter().enumerate() {
        for &kb in &idx[a..] {
            let prods: Vec<f64> = (0..n).map(|p| (fbm.value(p, ka) * fbm.value(p, kb)).as_f64()).collect();
            let mean = prods.iter().sum::<f64>() / n as f64;
            let var = prods.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let (t, u) = (fbm.grid.node(ka) - origin, fbm.grid.node(kb) - origin);
            out.push(CovarianceEntry {
                t: fbm.grid.node(ka).as_f64(),
                u: fbm.grid.node(kb).as_f64(),
                empirical: mean,
                exact: fbm_covariance(t, u, fbm.hurst).as_f64(),
                std_error: (var / n as f64).sqrt(),
            });
        }
    }
    Ok(out)
}

/// One chain trajectory: start state and exact `(jump time, new state)` list.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimePath<T> {
    pub initial: usize,
    pub jumps: Vec<(T, usize)>,
}

impl<T: Scalar> RegimePath<T> {
    /// Right-continuous state at time `t`.
    pub fn state_at(&self, t: T) -> usize {
        let mut s = self.initial;
        for (tj, j) in &self.jumps {
            if *tj <= t {
                s = *j;
            } else {
                break;
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct RegimePaths<T> {
    pub grid: TimeGrid<T>,
    pub m: usize,
    pub initial: usize,
    pub paths: Vec<RegimePath<T>>,
    /// Node samples, `n_paths × n_nodes`.
    pub nodes: Vec<u32>,
}

impl<T: Scalar> RegimePaths<T> {
    #[inline]
    pub fn at(&self, p: usize, k: usize) -> usize {
        self.nodes[p * self.grid.n_nodes() + k] as usize
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    /// Regime paths built from explicit jump lists (validated against the grid).
    pub fn from_jumps(grid: &TimeGrid<T>, m: usize, paths: Vec<RegimePath<T>>) -> Result<Self> {
        let initial = paths.first().map(|p| p.initial).unwrap_or(0);
        for path in &paths {
            if path.initial >= m || path.jumps.iter().any(|(_, j)| *j >= m) {
                return Err(Error::Consistency("regime outside the state space".into()));
            }
            if path.jumps.windows(2).any(|w| w[1].0 < w[0].0) {
                return Err(Error::Consistency("jump times must be sorted".into()));
            }
        }
        let n_nodes = grid.n_nodes();
        let mut nodes = vec![0u32; paths.len() * n_nodes];
        for (p, path) in paths.iter().enumerate() {
            for k in 0..n_nodes {
                nodes[p * n_nodes + k] = path.state_at(grid.node(k)) as u32;
            }
        }
        Ok(Self { grid: *grid, m, initial, paths, nodes })
    }
}

pub fn simulate_regime_path<T: Scalar>(
    grid: &TimeGrid<T>,
    q: &GeneratorMatrix<T>,
    i_start: usize,
    n_paths: usize,
    seed: u64,
) -> Result<RegimePaths<T>> {
    if i_start >= q.m() {
        return Err(Error::InvalidParameter(format!(
            "start regime {} outside 1..={}",
            i_start + 1,
            q.m()
        )));
    }
    if n_paths == 0 {
        return Err(Error::DegenerateInput("no paths requested".into()));
    }
    let t_end = grid.t_end();
    let paths: Vec<RegimePath<T>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(seed, StreamTag::Regime, p as u64);
            let mut t = grid.t0();
            let mut s = i_start;
            let mut jumps = Vec::new();
            loop {
                let rate = q.exit_rate(s);
                if rate <= T::zero() {
                    break;
                }
                let hold = T::lit(rng.sample::<f64, _>(Exp1)) / rate;
                t += hold;
                if t > t_end {
                    break;
                }
                let u = T::lit(rng.gen::<f64>()) * rate;
                let mut acc = T::zero();
                let mut next = s;
                for j in 0..q.m() {
                    if j == s {
                        continue;
                    }
                    acc += q.rate(s, j);
                    next = j;
                    if u < acc {
                        break;
                    }
                }
                jumps.push((t, next));
                s = next;
            }
            RegimePath { initial: i_start, jumps }
        })
        .collect();
    RegimePaths::from_jumps(grid, q.m(), paths)
}

/// Per-step increments of every M_{ij}, with the exact occupation times and
/// jump counts they were built from.
#[derive(Clone, Debug)]
pub struct MartingaleIncrements<T> {
    pub grid: TimeGrid<T>,
    pub pairs: Vec<(usize, usize)>,
    /// `n_paths × n_steps × n_pairs`.
    pub increments: PathSet<T>,
    /// `n_paths × n_steps × n_pairs` transition counts.
    pub counts: PathSet<T>,
    /// `n_paths × n_steps × m` time spent in each state during the step.
    pub occupation: PathSet<T>,
}

impl<T: Scalar> MartingaleIncrements<T> {
    /// Column of the ordered pair `(i, j)` in [`MartingaleIncrements::increments`].
    pub fn pair(&self, i: usize, j: usize) -> Result<usize> {
        self.pairs
            .iter()
            .position(|&(a, b)| a == i && b == j && a != b)
            .ok_or(Error::InvalidPair(i, j))
    }
}

pub fn compensated_martingales<T: Scalar>(
    regimes: &RegimePaths<T>,
    q: &GeneratorMatrix<T>,
    grid: &TimeGrid<T>,
) -> Result<MartingaleIncrements<T>> {
    if !regimes.grid.matches(grid) {
        return Err(Error::Consistency("regime paths live on a different grid".into()));
    }
    if regimes.m != q.m() {
        return Err(Error::Consistency("generator size differs from regime paths".into()));
    }
    let m = q.m();
    let pairs = q.pairs();
    let n_pairs = pairs.len();
    let n_paths = regimes.n_paths();
    let n_steps = grid.n_steps();
    let mut counts = PathSet::zeros(n_paths, n_steps, n_pairs);
    let mut occupation = PathSet::zeros(n_paths, n_steps, m);
    counts
        .data_mut()
        .par_chunks_mut((n_steps * n_pairs).max(1))
        .zip(occupation.data_mut().par_chunks_mut(n_steps * m))
        .enumerate()
        .for_each(|(p, (cnt, occ))| {
            if n_pairs == 0 {
                for k in 0..n_steps {
                    occ[k * m] = grid.node(k + 1) - grid.node(k);
                }
                return;
            }
            let path = &regimes.paths[p];
            let mut s = path.initial;
            let mut next_jump = 0usize;
            while next_jump < path.jumps.len() && path.jumps[next_jump].0 <= grid.t0() {
                s = path.jumps[next_jump].1;
                next_jump += 1;
            }
            for k in 0..n_steps {
                let b = grid.node(k + 1);
                let mut cur = grid.node(k);
                while next_jump < path.jumps.len() && path.jumps[next_jump].0 <= b {
                    let (tj, j) = path.jumps[next_jump];
                    occ[k * m + s] += tj - cur;
                    let idx = s * (m - 1) + if j > s { j - 1 } else { j };
                    cnt[k * n_pairs + idx] += T::one();
                    cur = tj;
                    s = j;
                    next_jump += 1;
                }
                occ[k * m + s] += b - cur;
            }
        });
    let mut increments = PathSet::zeros(n_paths, n_steps, n_pairs);
    for p in 0..n_paths {
        for k in 0..n_steps {
            for (idx, &(i, j)) in pairs.iter().enumerate() {
                let v = counts.get(p, k, idx) - q.rate(i, j) * occupation.get(p, k, i);
                increments.at_mut(p, k)[idx] = v;
            }
        }
    }
    Ok(MartingaleIncrements { grid: *grid, pairs, increments, counts, occupation })
}

/// Everything needed to build a [`DriverBundle`].
#[derive(Clone, Debug)]
pub struct DriverConfig<T> {
    pub grid: TimeGrid<T>,
    pub brownian_dim: usize,
    pub n_paths: usize,
    pub hurst: Hurst<T>,
    pub generator: GeneratorMatrix<T>,
    pub initial_regime: usize,
    pub seed: u64,
}

/// Sampled W, B^H, α and M_{ij} on one shared grid.
#[derive(Clone, Debug)]
pub struct DriverBundle<T> {
    pub grid: TimeGrid<T>,
    pub seed: u64,
    pub generator: GeneratorMatrix<T>,
    pub brownian: BrownianIncrements<T>,
    pub fbm: FbmPaths<T>,
    pub regimes: RegimePaths<T>,
    pub martingales: MartingaleIncrements<T>,
}

impl<T: Scalar> DriverBundle<T> {
    pub fn simulate(cfg: &DriverConfig<T>) -> Result<Self> {
        let brownian = simulate_brownian(&cfg.grid, cfg.brownian_dim, cfg.n_paths, cfg.seed)?;
        let fbm = simulate_fbm(&cfg.grid, cfg.hurst, cfg.n_paths, cfg.seed)?;
        let regimes =
            simulate_regime_path(&cfg.grid, &cfg.generator, cfg.initial_regime, cfg.n_paths, cfg.seed)?;
        let martingales = compensated_martingales(&regimes, &cfg.generator, &cfg.grid)?;
        Ok(Self {
            grid: cfg.grid,
            seed: cfg.seed,
            generator: cfg.generator.clone(),
            brownian,
            fbm,
            regimes,
            martingales,
        })
    }

    /// Assembles a bundle from independently produced parts.
    pub fn from_parts(
        seed: u64,
        generator: GeneratorMatrix<T>,
        brownian: BrownianIncrements<T>,
        fbm: FbmPaths<T>,
        regimes: RegimePaths<T>,
    ) -> Result<Self> {
        let grid = brownian.grid;
        let n = brownian.increments.n_paths();
        if !fbm.grid.matches(&grid) || !regimes.grid.matches(&grid) {
            return Err(Error::Consistency("driver parts live on different grids".into()));
        }
        if fbm.values.n_paths() != n || regimes.n_paths() != n {
            return Err(Error::Consistency("driver parts differ in path count".into()));
        }
        let martingales = compensated_martingales(&regimes, &generator, &grid)?;
        Ok(Self { grid, seed, generator, brownian, fbm, regimes, martingales })
    }

    pub fn n_paths(&self) -> usize {
        self.brownian.increments.n_paths()
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian.dim()
    }

    pub fn m(&self) -> usize {
        self.generator.m()
    }

    pub fn n_pairs(&self) -> usize {
        self.martingales.pairs.len()
    }

    pub fn hurst(&self) -> Hurst<T> {
        self.fbm.hurst
    }

    #[inline]
    pub fn dw(&self, p: usize, k: usize) -> &[T] {
        self.brownian.increments.at(p, k)
    }

    #[inline]
    pub fn dbh(&self, p: usize, k: usize) -> T {
        self.fbm.increment(p, k)
    }

    #[inline]
    pub fn regime(&self, p: usize, k: usize) -> usize {
        self.regimes.at(p, k)
    }

    #[inline]
    pub fn dm(&self, p: usize, k: usize) -> &[T] {
        self.martingales.increments.at(p, k)
    }

    /// W(t_k) rebuilt from the increments, `n_paths × n_nodes × d`.
    pub fn brownian_levels(&self) -> PathSet<T> {
        let d = self.brownian_dim();
        let mut out = PathSet::zeros(self.n_paths(), self.grid.n_nodes(), d);
        out.par_fill(|p, path| {
            for k in 0..self.grid.n_steps() {
                for c in 0..d {
                    path[(k + 1) * d + c] = path[k * d + c] + self.brownian.increments.get(p, k, c);
                }
            }
        });
        out
    }

    /// W(t_k) followed by B^H(t_k), `n_paths × n_nodes × (d + 1)`.
    pub fn driver_levels(&self) -> PathSet<T> {
        let d = self.brownian_dim();
        let w = self.brownian_levels();
        let mut out = PathSet::zeros(self.n_paths(), self.grid.n_nodes(), d + 1);
        out.par_fill(|p, path| {
            for k in 0..self.grid.n_nodes() {
                path[k * (d + 1)..k * (d + 1) + d].copy_from_slice(w.at(p, k));
                path[k * (d + 1) + d] = self.fbm.value(p, k);
            }
        });
        out
    }

    /// Writes one CSV per driver as `<prefix>.<driver>.csv` inside `dir`.
    pub fn write_csvs(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let g = self.grid;
        let mut written = Vec::new();

        let path = dir.join(format!("{prefix}.brownian.csv"));
        let cols: Vec<String> = (1..=self.brownian_dim()).map(|i| format!("dW{i}")).collect();
        self.brownian
            .increments
            .write_csv(BufWriter::new(File::create(&path)?), &cols, |k| g.node(k))?;
        written.push(path);

        let path = dir.join(format!("{prefix}.fbm.csv"));
        self.fbm
            .values
            .write_csv(BufWriter::new(File::create(&path)?), &["BH".to_string()], |k| g.node(k))?;
        written.push(path);

        let path = dir.join(format!("{prefix}.regime.csv"));
        let mut labels = PathSet::zeros(self.n_paths(), g.n_nodes(), 1);
        for p in 0..self.n_paths() {
            for k in 0..g.n_nodes() {
                labels.at_mut(p, k)[0] = T::from_count(self.regime(p, k) + 1);
            }
        }
        labels.write_csv(BufWriter::new(File::create(&path)?), &["regime".to_string()], |k| g.node(k))?;
        written.push(path);

        if self.n_pairs() > 0 {
            let path = dir.join(format!("{prefix}.martingale.csv"));
            let cols: Vec<String> = self
                .martingales
                .pairs
                .iter()
                .map(|(i, j)| format!("dM{}_{}", i + 1, j + 1))
                .collect();
            self.martingales
                .increments
                .write_csv(BufWriter::new(File::create(&path)?), &cols, |k| g.node(k))?;
            written.push(path);
        }
        Ok(written)
    }
}
