//! Uniform time grids, the fractional kernel φ_H and the weighted norms that
//! define the solution spaces L^{2,K} and L^{2,H}.
//!
//! Every integral against φ_H is done by product integration: the path is
//! replaced by its trapezoidal cell average and the kernel is integrated
//! exactly over each pair of cells, which keeps the diagonal finite.

use crate::error::{Error, Result};
use crate::paths::PathSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid<T> {
    t0: T,
    t_end: T,
    n_steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(t0: T, t_end: T, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidGrid("grid endpoints must be finite".into()));
        }
        if t0 < T::zero() {
            return Err(Error::InvalidGrid(format!("t0 = {} is negative", t0.as_f64())));
        }
        if t_end <= t0 {
            return Err(Error::InvalidGrid(format!(
                "empty span [{}, {}]",
                t0.as_f64(),
                t_end.as_f64()
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("zero steps".into()));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn t0(&self) -> T {
        self.t0
    }

    pub fn t_end(&self) -> T {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn span(&self) -> T {
        self.t_end - self.t0
    }

    pub fn dt(&self) -> T {
        self.span() / T::from_count(self.n_steps)
    }

    /// `t0 + k·dt`, with the last node pinned to `t_end`.
    pub fn node(&self, k: usize) -> T {
        if k >= self.n_steps {
            self.t_end
        } else {
            self.t0 + T::from_count(k) * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..self.n_nodes()).map(|k| self.node(k)).collect()
    }

    /// Largest node index with `node(k) ≤ t` (clamped to the grid).
    pub fn index_at_or_before(&self, t: T) -> usize {
        if t <= self.t0 {
            return 0;
        }
        let raw = ((t - self.t0) / self.dt()).floor().as_f64();
        let mut k = (raw.max(0.0) as usize).min(self.n_steps);
        if self.node(k) > t && k > 0 {
            k -= 1;
        }
        while k < self.n_steps && self.node(k + 1) <= t {
            k += 1;
        }
        k
    }

    /// Index of the node equal to `t` up to a few ulps of the step, if any.
    pub fn node_index(&self, t: T) -> Option<usize> {
        let k = ((t - self.t0) / self.dt()).round().as_f64();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        let tol = self.dt() * T::lit(1e-6);
        ((self.node(k) - t).abs() <= tol).then_some(k)
    }

    pub fn matches(&self, other: &Self) -> bool {
        self.n_steps == other.n_steps && self.t0 == other.t0 && self.t_end == other.t_end
    }

    /// Trapezoidal weights: dt/2 at both ends, dt inside.
    pub fn trapezoid_weights(&self) -> Vec<T> {
        let dt = self.dt();
        let half = dt * T::lit(0.5);
        (0..self.n_nodes())
            .map(|k| if k == 0 || k == self.n_steps { half } else { dt })
            .collect()
    }

    /// Trapezoidal weights multiplied by `e^{2K·t_k}`.
    pub fn discounted_weights(&self, k_exp: T) -> Vec<T> {
        let two = T::lit(2.0);
        self.trapezoid_weights()
            .into_iter()
            .enumerate()
            .map(|(k, w)| w * (two * k_exp * self.node(k)).exp())
            .collect()
    }
}

/// Convenience constructor matching the grid operation name used in scenarios.
pub fn make_grid<T: Scalar>(t0: T, t_end: T, n_steps: usize) -> Result<TimeGrid<T>> {
    TimeGrid::new(t0, t_end, n_steps)
}

/// Hurst index restricted to the open interval (1/2, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hurst<T>(T);

impl<T: Scalar> Hurst<T> {
    pub fn new(h: T) -> Result<Self> {
        if h.is_finite() && h > T::lit(0.5) && h < T::one() {
            Ok(Self(h))
        } else {
            Err(Error::InvalidParameter(format!(
                "Hurst index {} outside (1/2, 1)",
                h.as_f64()
            )))
        }
    }

    pub fn value(self) -> T {
        self.0
    }

    /// H(2H−1).
    pub fn kernel_scale(self) -> T {
        self.0 * (T::lit(2.0) * self.0 - T::one())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightParams<T> {
    pub k: T,
    pub hurst: Hurst<T>,
}

impl<T: Scalar> WeightParams<T> {
    pub fn new(k: T, h: T) -> Result<Self> {
        if !k.is_finite() {
            return Err(Error::InvalidParameter("K must be finite".into()));
        }
        Ok(Self {
            k,
            hurst: Hurst::new(h)?,
        })
    }
}

/// φ_H(u, s) = H(2H−1)|u−s|^{2H−2}.
pub fn phi_h<T: Scalar>(u: T, s: T, hurst: Hurst<T>) -> Result<T> {
    if u == s {
        return Err(Error::Singularity(u.as_f64()));
    }
    let two = T::lit(2.0);
    Ok(hurst.kernel_scale() * (u - s).abs().powf(two * hurst.value() - two))
}

/// ½(|l+1|^a + |l−1|^a − 2|l|^a): the exact double integral of φ_H over two
/// unit cells `l` apart, which is also the lag-`l` covariance of unit fBm increments.
pub fn unit_cell_weight<T: Scalar>(lag: usize, hurst: Hurst<T>) -> T {
    let a = T::lit(2.0) * hurst.value();
    let half = T::lit(0.5);
    if lag < 8 {
        let l = T::from_count(lag);
        let one = T::one();
        return half * ((l + one).powf(a) + (l - one).abs().powf(a) - T::lit(2.0) * l.powf(a));
    }
    // (1+x)^a + (1−x)^a − 2 = 2 Σ_{k≥1} C(a,2k) x^{2k}, x = 1/l; avoids cancellation.
    let l = T::from_count(lag);
    let x = l.recip();
    let mut coeff = T::one();
    let mut power = T::one();
    let mut sum = T::zero();
    for j in 1..64usize {
        coeff = coeff * (a - T::from_count(j - 1)) / T::from_count(j);
        power *= x;
        if j % 2 == 0 {
            let term = coeff * power;
            sum += term;
            if term.abs() <= T::default_epsilon() * sum.abs() {
                break;
            }
        }
    }
    l.powf(a) * sum
}

/// Exact cell-pair integrals of φ_H on a uniform grid, indexed by lag.
pub fn cell_pair_weights<T: Scalar>(grid: &TimeGrid<T>, hurst: Hurst<T>) -> Vec<T> {
    let scale = grid.dt().powf(T::lit(2.0) * hurst.value());
    (0..grid.n_steps())
        .map(|l| scale * unit_cell_weight(l, hurst))
        .collect()
}

/// ∫ φ_H(t_k, u) du over the cell lying `l ≥ 1` cells behind node `t_k`.
pub fn history_line_weights<T: Scalar>(grid: &TimeGrid<T>, hurst: Hurst<T>) -> Vec<T> {
    let e = T::lit(2.0) * hurst.value() - T::one();
    let scale = hurst.value() * grid.dt().powf(e);
    let mut w = vec![T::zero(); grid.n_nodes()];
    for (l, slot) in w.iter_mut().enumerate().skip(1) {
        let hi = T::from_count(l).powf(e);
        let lo = if l == 1 { T::zero() } else { T::from_count(l - 1).powf(e) };
        *slot = scale * (hi - lo);
    }
    w
}

/// Trapezoidal cell averages of a `n_nodes × dim` path.
pub fn cell_averages<T: Scalar>(values: &[T], dim: usize) -> Vec<T> {
    let n_nodes = values.len() / dim.max(1);
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(n_nodes.saturating_sub(1) * dim);
    for k in 0..n_nodes.saturating_sub(1) {
        for c in 0..dim {
            out.push(half * (values[k * dim + c] + values[(k + 1) * dim + c]));
        }
    }
    out
}

/// ∫∫ f(u) f(s) φ_H(u,s) du ds for a deterministic scalar path (no square root).
pub fn l2h_norm<T: Scalar>(f: &[T], hurst: Hurst<T>, grid: &TimeGrid<T>) -> Result<T> {
    if f.len() != grid.n_nodes() {
        return Err(Error::Consistency(format!(
            "path has {} nodes, grid has {}",
            f.len(),
            grid.n_nodes()
        )));
    }
    let avg = cell_averages(f, 1);
    let w = cell_pair_weights(grid, hurst);
    let n = avg.len();
    let mut total = T::zero();
    for lag in 0..n {
        let mut s = T::zero();
        for i in 0..n - lag {
            s += avg[i] * avg[i + lag];
        }
        total += if lag == 0 { w[0] * s } else { T::lit(2.0) * w[lag] * s };
    }
    Ok(total)
}

/// 2∫ e^{2Ks} ⟨g(s), ∫_{t0}^{s} φ_H(s,u) g(u) du⟩ ds for a `n_nodes × dim` path `g`.
///
/// This is the fBm contribution to d(|x|² e^{2Ks}) for an additive coefficient `g`.
pub fn weighted_history_integral<T: Scalar>(
    g: &[T],
    dim: usize,
    hurst: Hurst<T>,
    k_exp: T,
    grid: &TimeGrid<T>,
) -> Result<T> {
    if g.len() != grid.n_nodes() * dim {
        return Err(Error::Consistency("history integrand does not match grid".into()));
    }
    let avg = cell_averages(g, dim);
    let w = cell_pair_weights(grid, hurst);
    let n = grid.n_steps();
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for i in 0..n {
        let mid = half * (grid.node(i) + grid.node(i + 1));
        let disc = (two * k_exp * mid).exp();
        let mut acc = T::zero();
        for c in 0..dim {
            let gi = avg[i * dim + c];
            if gi == T::zero() {
                continue;
            }
            let mut inner = half * w[0] * gi;
            for j in 0..i {
                inner += w[i - j] * avg[j * dim + c];
            }
            acc += gi * inner;
        }
        total += disc * acc;
    }
    Ok(two * total)
}

/// A weighted norm together with the window it was computed on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedNorm<T> {
    pub value: T,
    pub horizon: T,
    /// `E|f(t_end) e^{K t_end}|² / (2|K|)`, reported only for `K < 0`.
    pub tail_bound: Option<T>,
}

/// E ∫ |f(s) e^{Ks}|² ds by trapezoidal quadrature and ensemble averaging.
pub fn weighted_sq_integral<T: Scalar>(f: &PathSet<T>, k_exp: T, grid: &TimeGrid<T>) -> Result<T> {
    check_ensemble(f, grid)?;
    let w = grid.discounted_weights(k_exp);
    let mut total = T::zero();
    for p in 0..f.n_paths() {
        let mut s = T::zero();
        for (k, wk) in w.iter().enumerate() {
            let v = f.at(p, k);
            s += *wk * v.iter().fold(T::zero(), |a, x| a + *x * *x);
        }
        total += s;
    }
    Ok(total / T::from_count(f.n_paths()))
}

/// {E ∫ |f(s) e^{Ks}|² ds}^{1/2} on the grid window.
pub fn weighted_l2k_norm<T: Scalar>(
    f: &PathSet<T>,
    k_exp: T,
    grid: &TimeGrid<T>,
) -> Result<WeightedNorm<T>> {
    let sq = weighted_sq_integral(f, k_exp, grid)?;
    let tail_bound = (k_exp < T::zero()).then(|| {
        let last = grid.n_steps();
        let disc = (T::lit(2.0) * k_exp * grid.t_end()).exp();
        let mut s = T::zero();
        for p in 0..f.n_paths() {
            s += f.at(p, last).iter().fold(T::zero(), |a, x| a + *x * *x);
        }
        s / T::from_count(f.n_paths()) * disc / (T::lit(2.0) * k_exp.abs())
    });
    Ok(WeightedNorm {
        value: sq.sqrt(),
        horizon: grid.t_end(),
        tail_bound,
    })
}

fn check_ensemble<T: Scalar>(f: &PathSet<T>, grid: &TimeGrid<T>) -> Result<()> {
    if f.n_paths() == 0 {
        return Err(Error::DegenerateInput("empty ensemble".into()));
    }
    if f.n_nodes() != grid.n_nodes() {
        return Err(Error::Consistency(format!(
            "ensemble has {} nodes, grid has {}",
            f.n_nodes(),
            grid.n_nodes()
        )));
    }
    Ok(())
}
