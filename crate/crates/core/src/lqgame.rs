//! Two-player zero-sum linear-quadratic game with regime switching and an fBm
//! forcing term. Player 1 minimises, player 2 maximises
//! J = ½ E ∫ e^{2Ks} ⟨Π(x, u₁, u₂), (x, u₁, u₂)⟩ ds with Π = [[Q, Sᵀ], [S, R]].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::coupled::{
    solve_fbsde, ContinuationOptions, ContinuationTrace, CoupledCoefficients, FbsdeSpec, GammaHomotopy,
    KConditions, LipschitzTable, Theta, ThetaPoint,
};
use crate::drivers::{normal, substream, DriverBundle, StreamTag};
use crate::error::{Error, Result};
use crate::forward::{euler_solve, FnCoefficients, ForwardConstants, ForwardSpec, InitialState, Site};
use crate::paths::PathSet;
use crate::scalar::Scalar;
use crate::timegrid::{weighted_l2k_norm, TimeGrid};

/// Matrix-valued coefficient of time and (0-based) regime.
pub type MatrixFn<T> = Arc<dyn Fn(T, usize) -> DMatrix<T> + Send + Sync>;
/// Deterministic vector-valued function of time.
pub type VectorFn<T> = Arc<dyn Fn(T) -> DVector<T> + Send + Sync>;

pub fn constant<T: Scalar>(m: DMatrix<T>) -> MatrixFn<T> {
    Arc::new(move |_, _| m.clone())
}

/// One matrix per regime; regimes past the end reuse the last entry.
pub fn per_regime<T: Scalar>(ms: Vec<DMatrix<T>>) -> MatrixFn<T> {
    assert!(!ms.is_empty(), "per_regime needs at least one matrix");
    Arc::new(move |_, i| ms[i.min(ms.len() - 1)].clone())
}

pub fn scalar_const<T: Scalar>(v: T) -> MatrixFn<T> {
    constant(DMatrix::from_element(1, 1, v))
}

pub fn constant_vector<T: Scalar>(v: DVector<T>) -> VectorFn<T> {
    Arc::new(move |_| v.clone())
}

/// State dimension n, control dimensions m₁ and m₂, Brownian dimension d.
#[derive(Clone)]
pub struct LqProblem<T: Scalar> {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub d: usize,
    pub a: MatrixFn<T>,
    pub b1: MatrixFn<T>,
    pub b2: MatrixFn<T>,
    pub c: Vec<MatrixFn<T>>,
    pub d1: Vec<MatrixFn<T>>,
    pub d2: Vec<MatrixFn<T>>,
    /// Deterministic integrand of dB^H.
    pub gamma_fbm: VectorFn<T>,
    pub q: MatrixFn<T>,
    pub s1: MatrixFn<T>,
    pub s2: MatrixFn<T>,
    pub r11: MatrixFn<T>,
    pub r12: MatrixFn<T>,
    pub r21: MatrixFn<T>,
    pub r22: MatrixFn<T>,
    pub k: T,
    pub x0: DVector<T>,
}

impl<T: Scalar> LqProblem<T> {
    /// All coefficients zero except R₁₁ = I and R₂₂ = −I.
    pub fn zeros(n: usize, m1: usize, m2: usize, d: usize, k: T) -> Self {
        let z = |r, c| constant(DMatrix::zeros(r, c));
        Self {
            n,
            m1,
            m2,
            d,
            a: z(n, n),
            b1: z(n, m1),
            b2: z(n, m2),
            c: (0..d).map(|_| z(n, n)).collect(),
            d1: (0..d).map(|_| z(n, m1)).collect(),
            d2: (0..d).map(|_| z(n, m2)).collect(),
            gamma_fbm: constant_vector(DVector::zeros(n)),
            q: z(n, n),
            s1: z(m1, n),
            s2: z(m2, n),
            r11: constant(DMatrix::identity(m1, m1)),
            r12: z(m1, m2),
            r21: z(m2, m1),
            r22: constant(-DMatrix::identity(m2, m2)),
            k,
            x0: DVector::zeros(n),
        }
    }

    pub fn m(&self) -> usize {
        self.m1 + self.m2
    }

    /// Every coefficient evaluated at (t, regime), with the control blocks joined:
    /// B = (B₁, B₂), Dᵢ = (D₁ᵢ, D₂ᵢ), S = (S₁; S₂), R the 2×2 block.
    pub fn snapshot(&self, t: T, regime: usize) -> Result<Snapshot<T>> {
        let (n, m1, m2, m) = (self.n, self.m1, self.m2, self.m());
        if self.c.len() != self.d || self.d1.len() != self.d || self.d2.len() != self.d {
            return Err(Error::Consistency(format!("expected {} Brownian coefficient blocks", self.d)));
        }
        if self.x0.len() != n {
            return Err(Error::Consistency("initial state dimension mismatch".into()));
        }
        let get = |name: &str, f: &MatrixFn<T>, r: usize, c: usize| -> Result<DMatrix<T>> {
            let v = f(t, regime);
            if v.nrows() != r || v.ncols() != c {
                return Err(Error::Consistency(format!(
                    "{name} is {}×{}, expected {r}×{c}",
                    v.nrows(),
                    v.ncols()
                )));
            }
            if !v.iter().all(|e| e.is_finite()) {
                return Err(Error::Domain(format!(
                    "{name} is not finite at t = {}, regime = {}",
                    t.as_f64(),
                    regime + 1
                )));
            }
            Ok(v)
        };
        let a = get("A", &self.a, n, n)?;
        let mut b = DMatrix::zeros(n, m);
        b.columns_mut(0, m1).copy_from(&get("B1", &self.b1, n, m1)?);
        b.columns_mut(m1, m2).copy_from(&get("B2", &self.b2, n, m2)?);
        let mut c = Vec::with_capacity(self.d);
        let mut d = Vec::with_capacity(self.d);
        for i in 0..self.d {
            c.push(get("C", &self.c[i], n, n)?);
            let mut di = DMatrix::zeros(n, m);
            di.columns_mut(0, m1).copy_from(&get("D1", &self.d1[i], n, m1)?);
            di.columns_mut(m1, m2).copy_from(&get("D2", &self.d2[i], n, m2)?);
            d.push(di);
        }
        let q = get("Q", &self.q, n, n)?;
        let mut s = DMatrix::zeros(m, n);
        s.rows_mut(0, m1).copy_from(&get("S1", &self.s1, m1, n)?);
        s.rows_mut(m1, m2).copy_from(&get("S2", &self.s2, m2, n)?);
        let mut r = DMatrix::zeros(m, m);
        r.view_mut((0, 0), (m1, m1)).copy_from(&get("R11", &self.r11, m1, m1)?);
        r.view_mut((0, m1), (m1, m2)).copy_from(&get("R12", &self.r12, m1, m2)?);
        r.view_mut((m1, 0), (m2, m1)).copy_from(&get("R21", &self.r21, m2, m1)?);
        r.view_mut((m1, m1), (m2, m2)).copy_from(&get("R22", &self.r22, m2, m2)?);
        let gamma = (self.gamma_fbm)(t);
        if gamma.len() != n || !gamma.iter().all(|v| v.is_finite()) {
            return Err(Error::Consistency("Γ_fbm must be a finite n-vector".into()));
        }
        Ok(Snapshot { a, b, c, d, q, s, r, gamma })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: Vec<DMatrix<T>>,
    pub d: Vec<DMatrix<T>>,
    pub q: DMatrix<T>,
    pub s: DMatrix<T>,
    pub r: DMatrix<T>,
    pub gamma: DVector<T>,
}

/// Evenly spaced grid nodes (at most 101) crossed with every regime.
pub fn probe_set<T: Scalar>(grid: &TimeGrid<T>, m: usize) -> Vec<(T, usize)> {
    let nodes = grid.n_nodes();
    let stride = nodes.div_ceil(101).max(1);
    let mut ks: Vec<usize> = (0..nodes).step_by(stride).collect();
    if *ks.last().unwrap() != nodes - 1 {
        ks.push(nodes - 1);
    }
    ks.iter().flat_map(|&k| (0..m).map(move |i| (grid.node(k), i))).collect()
}

fn sym<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

fn eigen_range<T: Scalar>(m: &DMatrix<T>) -> Result<(T, T)> {
    if m.nrows() == 0 {
        return Ok((T::zero(), T::zero()));
    }
    let ev = m.clone().symmetric_eigen().eigenvalues;
    if !ev.iter().all(|v| v.is_finite()) {
        return Err(Error::Conditioning("symmetric eigensolve produced non-finite values".into()));
    }
    Ok((ev.min(), ev.max()))
}

fn op_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        T::zero()
    } else {
        (m.transpose() * m).symmetric_eigen().eigenvalues.max().max(T::zero()).sqrt()
    }
}

fn require_probes<T>(probes: &[(T, usize)]) -> Result<()> {
    if probes.is_empty() {
        Err(Error::DegenerateInput("empty probe set".into()))
    } else {
        Ok(())
    }
}

/// κ_x = −½ max λ_max(A + Aᵀ) over the probes.
pub fn compute_kappa_x<T: Scalar>(prob: &LqProblem<T>, probes: &[(T, usize)]) -> Result<T> {
    require_probes(probes)?;
    let mut worst = T::min_value().unwrap();
    for &(t, i) in probes {
        let a = (prob.a)(t, i);
        if a.nrows() != prob.n || a.ncols() != prob.n {
            return Err(Error::Consistency("A must be n×n".into()));
        }
        let (_, hi) = eigen_range(&(&a + a.transpose()))?;
        worst = worst.max(hi);
    }
    Ok(-T::lit(0.5) * worst)
}

/// K_max = κ_x − ½ (max ‖C‖)², with C = (C₁; …; C_d) stacked. Errors when prob.K ≥ K_max.
pub fn admissible_k_bound<T: Scalar>(prob: &LqProblem<T>, kappa_x: T, probes: &[(T, usize)]) -> Result<T> {
    require_probes(probes)?;
    let mut c_max = T::zero();
    for &(t, i) in probes {
        let mut gram = DMatrix::<T>::zeros(prob.n, prob.n);
        for c in &prob.c {
            let ci = c(t, i);
            gram += ci.transpose() * &ci;
        }
        let (_, hi) = eigen_range(&gram)?;
        c_max = c_max.max(hi.max(T::zero()).sqrt());
    }
    let k_max = kappa_x - T::lit(0.5) * c_max * c_max;
    if prob.k >= k_max {
        return Err(Error::InadmissibleK { k: prob.k.as_f64(), k_max: k_max.as_f64() });
    }
    Ok(k_max)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AssumptionDReport {
    /// R₁₁ ≻ 0, R₂₂ ≺ 0, R invertible, R₂₁ = R₁₂ᵀ, [[Q, S₁ᵀ], [S₁, R₁₁]] ⪰ 0 and
    /// [[Q, S₂ᵀ], [S₂, R₂₂]] ⪯ 0.
    pub zero_sum_pattern: bool,
    /// R ≻ 0 read literally.
    pub literal_r_pos: bool,
    pub details: Vec<String>,
}

pub fn check_assumption_d<T: Scalar>(prob: &LqProblem<T>, probes: &[(T, usize)]) -> Result<AssumptionDReport> {
    require_probes(probes)?;
    let (n, m1, m2) = (prob.n, prob.m1, prob.m2);
    let mut details = Vec::new();
    let mut pattern = true;
    let mut literal = true;
    let mut note = |ok: &mut bool, msg: String| {
        if !details.contains(&msg) {
            details.push(msg);
        }
        *ok = false;
    };
    for &(t, i) in probes {
        let s = prob.snapshot(t, i)?;
        let scale = T::one() + s.r.amax() + s.q.amax() + s.s.amax();
        let tol = T::lit(1e-10) * scale;
        let at = format!("t = {}, regime {}", t.as_f64(), i + 1);
        let r11 = s.r.view((0, 0), (m1, m1)).into_owned();
        let r22 = s.r.view((m1, m1), (m2, m2)).into_owned();
        let r12 = s.r.view((0, m1), (m1, m2)).into_owned();
        let r21 = s.r.view((m1, 0), (m2, m1)).into_owned();
        if (&r21 - r12.transpose()).amax() > tol {
            note(&mut pattern, format!("R21 differs from R12ᵀ at {at}"));
        }
        if eigen_range(&sym(&r11))?.0 <= tol {
            note(&mut pattern, format!("R11 not positive definite at {at}"));
        }
        if m2 > 0 && eigen_range(&sym(&r22))?.1 >= -tol {
            note(&mut pattern, format!("R22 not negative definite at {at}"));
        }
        if s.r.clone().try_inverse().is_none() {
            note(&mut pattern, format!("R singular at {at}"));
        }
        let block = |sj: DMatrix<T>, rjj: &DMatrix<T>| {
            let mj = rjj.nrows();
            let mut b = DMatrix::zeros(n + mj, n + mj);
            b.view_mut((0, 0), (n, n)).copy_from(&s.q);
            b.view_mut((0, n), (n, mj)).copy_from(&sj.transpose());
            b.view_mut((n, 0), (mj, n)).copy_from(&sj);
            b.view_mut((n, n), (mj, mj)).copy_from(rjj);
            sym(&b)
        };
        let s1 = s.s.rows(0, m1).into_owned();
        let s2 = s.s.rows(m1, m2).into_owned();
        if eigen_range(&block(s1, &r11))?.0 < -tol {
            note(&mut pattern, format!("[[Q, S1ᵀ], [S1, R11]] not positive semidefinite at {at}"));
        }
        if eigen_range(&block(s2, &r22))?.1 > tol {
            note(&mut pattern, format!("[[Q, S2ᵀ], [S2, R22]] not negative semidefinite at {at}"));
        }
        if eigen_range(&sym(&s.r))?.0 <= tol {
            note(&mut literal, format!("R not positive definite at {at}"));
        }
    }
    Ok(AssumptionDReport { zero_sum_pattern: pattern, literal_r_pos: literal, details })
}

/// Coefficient snapshots at every grid node and regime, index `k·m + i`.
struct Table<T: Scalar> {
    grid: TimeGrid<T>,
    m: usize,
    items: Vec<Snapshot<T>>,
}

impl<T: Scalar> Table<T> {
    fn build(prob: &LqProblem<T>, grid: &TimeGrid<T>, m: usize) -> Result<Self> {
        let mut items = Vec::with_capacity(grid.n_nodes() * m);
        for k in 0..grid.n_nodes() {
            for i in 0..m {
                items.push(prob.snapshot(grid.node(k), i)?);
            }
        }
        Ok(Self { grid: *grid, m, items })
    }

    fn get(&self, k: usize, i: usize) -> &Snapshot<T> {
        &self.items[k * self.m + i]
    }
}

fn check_controls<T: Scalar>(prob: &LqProblem<T>, u1: &PathSet<T>, u2: &PathSet<T>, bundle: &DriverBundle<T>) -> Result<()> {
    let (np, nodes) = (bundle.n_paths(), bundle.grid.n_nodes());
    let ok = |u: &PathSet<T>, m| u.n_paths() == np && u.n_nodes() == nodes && u.dim() == m;
    if !ok(u1, prob.m1) || !ok(u2, prob.m2) {
        return Err(Error::Consistency("controls do not match the bundle and control dimensions".into()));
    }
    if prob.d != bundle.brownian_dim() {
        return Err(Error::Consistency(format!(
            "problem has {} Brownian components, bundle has {}",
            prob.d,
            bundle.brownian_dim()
        )));
    }
    Ok(())
}

fn joined<'a, T: Scalar>(u1: &'a [T], u2: &'a [T]) -> impl Iterator<Item = T> + 'a {
    u1.iter().chain(u2).copied()
}

/// Euler solve of dx = (Ax + Bu) ds + Σ (Cᵢx + Dᵢu) dWᵢ + Γ_fbm dB^H from x₀.
fn simulate_state<T: Scalar>(
    prob: &LqProblem<T>,
    table: &Table<T>,
    u1: &PathSet<T>,
    u2: &PathSet<T>,
    bundle: &DriverBundle<T>,
) -> Result<PathSet<T>> {
    let (n, d) = (prob.n, prob.d);
    let gamma_nodes: Vec<DVector<T>> = (0..table.grid.n_nodes()).map(|k| table.get(k, 0).gamma.clone()).collect();
    let coeffs = FnCoefficients::new(
        n,
        d,
        |s: &Site<T>, x: &[T], out: &mut [T]| {
            let c = table.get(s.node, s.regime);
            let u: Vec<T> = joined(u1.at(s.path, s.node), u2.at(s.path, s.node)).collect();
            for (r, o) in out.iter_mut().enumerate() {
                let mut v = T::zero();
                for j in 0..n {
                    v += c.a[(r, j)] * x[j];
                }
                for (j, uj) in u.iter().enumerate() {
                    v += c.b[(r, j)] * *uj;
                }
                *o = v;
            }
        },
        |s: &Site<T>, x: &[T], out: &mut [T]| {
            let c = table.get(s.node, s.regime);
            let u: Vec<T> = joined(u1.at(s.path, s.node), u2.at(s.path, s.node)).collect();
            for i in 0..d {
                for r in 0..n {
                    let mut v = T::zero();
                    for j in 0..n {
                        v += c.c[i][(r, j)] * x[j];
                    }
                    for (j, uj) in u.iter().enumerate() {
                        v += c.d[i][(r, j)] * *uj;
                    }
                    out[r * d + i] = v;
                }
            }
        },
        |t: T, out: &mut [T]| {
            let k = table.grid.node_index(t).unwrap_or_else(|| table.grid.index_at_or_before(t));
            out.copy_from_slice(gamma_nodes[k].as_slice());
        },
    );
    let spec = ForwardSpec {
        coefficients: &coeffs,
        initial: InitialState::Fixed(prob.x0.iter().copied().collect()),
        constants: ForwardConstants::new(T::zero(), T::zero(), T::zero(), prob.k)?,
    };
    Ok(euler_solve(&spec, bundle)?.x)
}

/// Per-path ½ ∫ e^{2Ks} ⟨Π(x, u), (x, u)⟩ ds by trapezoidal quadrature.
fn path_costs<T: Scalar>(
    prob: &LqProblem<T>,
    table: &Table<T>,
    x: &PathSet<T>,
    u1: &PathSet<T>,
    u2: &PathSet<T>,
    bundle: &DriverBundle<T>,
) -> Vec<T> {
    let w = table.grid.discounted_weights(prob.k);
    let half = T::lit(0.5);
    (0..x.n_paths())
        .map(|p| {
            let mut acc = T::zero();
            for (k, wk) in w.iter().enumerate() {
                let c = table.get(k, bundle.regime(p, k));
                let xv = DVector::from_column_slice(x.at(p, k));
                let uv = DVector::from_iterator(prob.m(), joined(u1.at(p, k), u2.at(p, k)));
                let form = xv.dot(&(&c.q * &xv)) + T::lit(2.0) * uv.dot(&(&c.s * &xv)) + uv.dot(&(&c.r * &uv));
                acc += *wk * form;
            }
            half * acc
        })
        .collect()
}

fn mean_se<T: Scalar>(v: &[T]) -> (T, T) {
    let n = T::from_count(v.len());
    let mean = v.iter().fold(T::zero(), |a, b| a + *b) / n;
    if v.len() < 2 {
        return (mean, T::zero());
    }
    let var = v.iter().fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean)) / (n - T::one());
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate of J^K on the truncation window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostEstimate<T> {
    pub value: T,
    pub std_error: T,
    pub horizon: T,
    /// |E[integrand at the horizon]| / (2|K|) for K < 0.
    pub tail_bound: Option<T>,
}

fn estimate<T: Scalar>(costs: &[T], prob: &LqProblem<T>, grid: &TimeGrid<T>, tail_integrand: T) -> CostEstimate<T> {
    let (value, std_error) = mean_se(costs);
    let tail_bound = (prob.k < T::zero()).then(|| tail_integrand.abs() / (T::lit(2.0) * prob.k.abs()));
    CostEstimate { value, std_error, horizon: grid.t_end(), tail_bound }
}

fn cost_with<T: Scalar>(
    prob: &LqProblem<T>,
    table: &Table<T>,
    u1: &PathSet<T>,
    u2: &PathSet<T>,
    bundle: &DriverBundle<T>,
) -> Result<(PathSet<T>, Vec<T>, CostEstimate<T>)> {
    let x = simulate_state(prob, table, u1, u2, bundle)?;
    let costs = path_costs(prob, table, &x, u1, u2, bundle);
    let last = bundle.grid.n_steps();
    let disc = (T::lit(2.0) * prob.k * bundle.grid.t_end()).exp();
    let mut tail = T::zero();
    for p in 0..x.n_paths() {
        let c = table.get(last, bundle.regime(p, last));
        let xv = DVector::from_column_slice(x.at(p, last));
        let uv = DVector::from_iterator(prob.m(), joined(u1.at(p, last), u2.at(p, last)));
        tail += xv.dot(&(&c.q * &xv)) + T::lit(2.0) * uv.dot(&(&c.s * &xv)) + uv.dot(&(&c.r * &uv));
    }
    tail = T::lit(0.5) * disc * tail / T::from_count(x.n_paths());
    let est = estimate(&costs, prob, &bundle.grid, tail);
    Ok((x, costs, est))
}

/// State path under the given controls, Euler on the bundle grid.
pub fn simulate_controlled_state<T: Scalar>(
    prob: &LqProblem<T>,
    u1: &PathSet<T>,
    u2: &PathSet<T>,
    bundle: &DriverBundle<T>,
) -> Result<PathSet<T>> {
    check_controls(prob, u1, u2, bundle)?;
    let table = Table::build(prob, &bundle.grid, bundle.m())?;
    simulate_state(prob, &table, u1, u2, bundle)
}

/// Solves the state under (u₁, u₂) and averages the discounted quadratic cost.
pub fn evaluate_cost<T: Scalar>(
    prob: &LqProblem<T>,
    u1: &PathSet<T>,
    u2: &PathSet<T>,
    bundle: &DriverBundle<T>,
) -> Result<CostEstimate<T>> {
    check_controls(prob, u1, u2, bundle)?;
    let table = Table::build(prob, &bundle.grid, bundle.m())?;
    Ok(cost_with(prob, &table, u1, u2, bundle)?.2)
}

/// Coefficients of the Hamiltonian system at one (t, regime), with z entering
/// through its columns zᵢ.
#[derive(Clone, Debug)]
struct Blocks<T: Scalar> {
    fx: DMatrix<T>,
    fy: DMatrix<T>,
    fz: Vec<DMatrix<T>>,
    sx: Vec<DMatrix<T>>,
    sy: Vec<DMatrix<T>>,
    /// `sz[i][j]` multiplies z_j in row i of the diffusion.
    sz: Vec<Vec<DMatrix<T>>>,
    gx: DMatrix<T>,
    gy: DMatrix<T>,
    gz: Vec<DMatrix<T>>,
    ux: DMatrix<T>,
    uy: DMatrix<T>,
    uz: Vec<DMatrix<T>>,
    gamma: DVector<T>,
}

impl<T: Scalar> Blocks<T> {
    fn new(s: &Snapshot<T>, k: T, at: impl Fn() -> String) -> Result<Self> {
        let rinv = s
            .r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularWeight(format!("R not invertible at {}", at())))?;
        let n = s.a.nrows();
        let rs = &rinv * &s.s;
        let rb = &rinv * s.b.transpose();
        let rd: Vec<DMatrix<T>> = s.d.iter().map(|di| &rinv * di.transpose()).collect();
        let fx = &s.a - &s.b * &rs;
        let fy = -(&s.b * &rb);
        let fz = rd.iter().map(|r| -(&s.b * r)).collect();
        let sx: Vec<DMatrix<T>> = s.c.iter().zip(&s.d).map(|(ci, di)| ci - di * &rs).collect();
        let sy = s.d.iter().map(|di| -(di * &rb)).collect();
        let sz = s.d.iter().map(|di| rd.iter().map(|r| -(di * r)).collect()).collect();
        let gy = -(DMatrix::identity(n, n) * (T::lit(2.0) * k) + &fx).transpose();
        let gz = sx.iter().map(|m| -m.transpose()).collect();
        let gx = -(&s.q - s.s.transpose() * &rs);
        Ok(Self {
            ux: -rs,
            uy: -rb,
            uz: rd.into_iter().map(|r| -r).collect(),
            fx,
            fy,
            fz,
            sx,
            sy,
            sz,
            gx,
            gy,
            gz,
            gamma: s.gamma.clone(),
        })
    }
}

fn add_mv<T: Scalar>(out: &mut [T], m: &DMatrix<T>, v: &[T]) {
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (j, vj) in v.iter().enumerate() {
            acc += m[(r, j)] * *vj;
        }
        *o += acc;
    }
}

/// Adds m · z_i, where z is `n × d` row-major.
fn add_mz<T: Scalar>(out: &mut [T], m: &DMatrix<T>, z: &[T], i: usize, d: usize) {
    let n = m.ncols();
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for j in 0..n {
            acc += m[(r, j)] * z[j * d + i];
        }
        *o += acc;
    }
}

/// The coupled Hamiltonian FBSDE obtained by substituting
/// u* = −R⁻¹(Bᵀy + Dᵀz + Sx) into the state equation and the adjoint.
pub struct AssembledSystem<T: Scalar> {
    prob: LqProblem<T>,
    grid: TimeGrid<T>,
    m: usize,
    blocks: Vec<Blocks<T>>,
}

pub fn assemble_coupled_system<T: Scalar>(prob: &LqProblem<T>, grid: &TimeGrid<T>, m: usize) -> Result<AssembledSystem<T>> {
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one regime".into()));
    }
    let mut blocks = Vec::with_capacity(grid.n_nodes() * m);
    for k in 0..grid.n_nodes() {
        let t = grid.node(k);
        for i in 0..m {
            let s = prob.snapshot(t, i)?;
            blocks.push(Blocks::new(&s, prob.k, || format!("t = {}, regime {}", t.as_f64(), i + 1))?);
        }
    }
    Ok(AssembledSystem { prob: prob.clone(), grid: *grid, m, blocks })
}

/// Dense view of the assembled coefficients at one probe point.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianBlocks<T: Scalar> {
    /// Forward drift: fx·x + fy·y + Σ fzᵢ·zᵢ.
    pub fx: DMatrix<T>,
    pub fy: DMatrix<T>,
    pub fz: Vec<DMatrix<T>>,
    /// Diffusion column i: sxᵢ·x + syᵢ·y + Σ_j szᵢⱼ·z_j.
    pub sx: Vec<DMatrix<T>>,
    pub sy: Vec<DMatrix<T>>,
    pub sz: Vec<Vec<DMatrix<T>>>,
    /// Backward driver: gx·x + gy·y + Σ gzᵢ·zᵢ.
    pub gx: DMatrix<T>,
    pub gy: DMatrix<T>,
    pub gz: Vec<DMatrix<T>>,
}

impl<T: Scalar> AssembledSystem<T> {
    fn at(&self, t: T, regime: usize) -> std::borrow::Cow<'_, Blocks<T>> {
        let i = regime.min(self.m - 1);
        match self.grid.node_index(t) {
            Some(k) => std::borrow::Cow::Borrowed(&self.blocks[k * self.m + i]),
            None => {
                let s = self.prob.snapshot(t, i).expect("coefficients validated at assembly");
                std::borrow::Cow::Owned(Blocks::new(&s, self.prob.k, String::new).expect("R checked at assembly"))
            }
        }
    }

    pub fn blocks_at(&self, t: T, regime: usize) -> HamiltonianBlocks<T> {
        let b = self.at(t, regime).into_owned();
        HamiltonianBlocks { fx: b.fx, fy: b.fy, fz: b.fz, sx: b.sx, sy: b.sy, sz: b.sz, gx: b.gx, gy: b.gy, gz: b.gz }
    }

    /// κ_x of the closed-loop drift, −½ max λ_max(Ã + Ãᵀ).
    pub fn kappa_x(&self) -> Result<T> {
        let mut worst = T::min_value().unwrap();
        for b in &self.blocks {
            worst = worst.max(eigen_range(&sym(&b.fx))?.1);
        }
        Ok(-worst)
    }

    /// Smallest κ_y with ⟨g(y) − g(ȳ), ŷ⟩ ≥ −κ_y|ŷ|².
    pub fn kappa_y(&self) -> Result<T> {
        let mut low = T::max_value().unwrap();
        for b in &self.blocks {
            low = low.min(eigen_range(&sym(&b.gy))?.0);
        }
        Ok(-low)
    }

    fn lipschitz(&self) -> LipschitzTable<T> {
        let zero = [T::zero(); 5];
        let mut t = LipschitzTable { psi: zero, g: zero, b: zero, sigma: zero };
        for b in &self.blocks {
            let sum = |v: &[DMatrix<T>]| v.iter().fold(T::zero(), |a, m| a + op_norm(m));
            t.b[0] = t.b[0].max(op_norm(&b.fx));
            t.b[1] = t.b[1].max(op_norm(&b.fy));
            t.b[2] = t.b[2].max(sum(&b.fz));
            t.sigma[0] = t.sigma[0].max(sum(&b.sx));
            t.sigma[1] = t.sigma[1].max(sum(&b.sy));
            t.sigma[2] = t.sigma[2].max(b.sz.iter().fold(T::zero(), |a, row| a + sum(row)));
            t.g[0] = t.g[0].max(op_norm(&b.gx));
            t.g[1] = t.g[1].max(op_norm(&b.gy));
            t.g[2] = t.g[2].max(sum(&b.gz));
        }
        t
    }

    /// The coupled spec with κ_x, κ_y read off the assembled blocks.
    pub fn spec(&self, gamma_mode: GammaHomotopy) -> Result<FbsdeSpec<'_, T>> {
        Ok(FbsdeSpec {
            coefficients: self,
            kappa_x: self.kappa_x()?,
            kappa_y: self.kappa_y()?,
            k: self.prob.k,
            lipschitz: self.lipschitz(),
            gamma_mode,
        })
    }

    /// u = −R⁻¹(Bᵀy + Dᵀz + Sx) on every path and node, split into (u₁, u₂).
    pub fn controls(&self, theta: &Theta<T>, bundle: &DriverBundle<T>) -> (PathSet<T>, PathSet<T>) {
        let (m1, m2, d) = (self.prob.m1, self.prob.m2, self.prob.d);
        let nodes = theta.grid.n_nodes();
        let mut u = PathSet::zeros(theta.n_paths(), nodes, m1 + m2);
        u.par_fill(|p, path| {
            for k in 0..nodes {
                let b = self.at(theta.grid.node(k), bundle.regime(p, k));
                let out = &mut path[k * (m1 + m2)..(k + 1) * (m1 + m2)];
                add_mv(out, &b.ux, theta.x.at(p, k));
                add_mv(out, &b.uy, theta.y.at(p, k));
                for i in 0..d {
                    add_mz(out, &b.uz[i], theta.z.at(p, k), i, d);
                }
            }
        });
        split(&u, m1, m2)
    }
}

fn split<T: Scalar>(u: &PathSet<T>, m1: usize, m2: usize) -> (PathSet<T>, PathSet<T>) {
    let (np, nodes) = (u.n_paths(), u.n_nodes());
    let mut a = PathSet::zeros(np, nodes, m1);
    let mut b = PathSet::zeros(np, nodes, m2);
    for p in 0..np {
        for k in 0..nodes {
            let v = u.at(p, k);
            a.at_mut(p, k).copy_from_slice(&v[..m1]);
            b.at_mut(p, k).copy_from_slice(&v[m1..]);
        }
    }
    (a, b)
}

impl<T: Scalar> CoupledCoefficients<T> for AssembledSystem<T> {
    fn dim(&self) -> usize {
        self.prob.n
    }
    fn noise_dim(&self) -> usize {
        self.prob.d
    }
    fn psi(&self, _y: &[T], _regime: usize, out: &mut [T]) {
        out.copy_from_slice(self.prob.x0.as_slice());
    }
    fn b(&self, site: &Site<T>, th: &ThetaPoint<T>, out: &mut [T]) {
        let b = self.at(site.t, site.regime);
        out.iter_mut().for_each(|v| *v = T::zero());
        add_mv(out, &b.fx, th.x);
        add_mv(out, &b.fy, th.y);
        for (i, m) in b.fz.iter().enumerate() {
            add_mz(out, m, th.z, i, self.prob.d);
        }
    }
    fn sigma(&self, site: &Site<T>, th: &ThetaPoint<T>, out: &mut [T]) {
        let b = self.at(site.t, site.regime);
        let (n, d) = (self.prob.n, self.prob.d);
        let mut col = vec![T::zero(); n];
        for i in 0..d {
            col.iter_mut().for_each(|v| *v = T::zero());
            add_mv(&mut col, &b.sx[i], th.x);
            add_mv(&mut col, &b.sy[i], th.y);
            for (j, m) in b.sz[i].iter().enumerate() {
                add_mz(&mut col, m, th.z, j, d);
            }
            for r in 0..n {
                out[r * d + i] = col[r];
            }
        }
    }
    fn g(&self, site: &Site<T>, th: &ThetaPoint<T>, out: &mut [T]) {
        let b = self.at(site.t, site.regime);
        out.iter_mut().for_each(|v| *v = T::zero());
        add_mv(out, &b.gx, th.x);
        add_mv(out, &b.gy, th.y);
        for (i, m) in b.gz.iter().enumerate() {
            add_mz(out, m, th.z, i, self.prob.d);
        }
    }
    fn gamma(&self, t: T, out: &mut [T]) {
        out.copy_from_slice(self.at(t, 0).gamma.as_slice());
    }
}

/// A candidate saddle: controls, state and adjoint on a shared grid.
#[derive(Clone, Copy)]
pub struct Candidate<'a, T> {
    pub u1: &'a PathSet<T>,
    pub u2: &'a PathSet<T>,
    pub x: &'a PathSet<T>,
    pub y: &'a PathSet<T>,
    pub z: &'a PathSet<T>,
}

fn stationarity_paths<T: Scalar>(
    prob: &LqProblem<T>,
    table: &Table<T>,
    c: &Candidate<T>,
    bundle: &DriverBundle<T>,
) -> Result<PathSet<T>> {
    check_controls(prob, c.u1, c.u2, bundle)?;
    let (n, d, m) = (prob.n, prob.d, prob.m());
    let (np, nodes) = (bundle.n_paths(), bundle.grid.n_nodes());
    let ok = |s: &PathSet<T>, dim| s.n_paths() == np && s.n_nodes() == nodes && s.dim() == dim;
    if !ok(c.x, n) || !ok(c.y, n) || !ok(c.z, n * d) {
        return Err(Error::Consistency("candidate state or adjoint has the wrong shape".into()));
    }
    let mut out = PathSet::zeros(np, nodes, m);
    out.par_fill(|p, path| {
        for k in 0..nodes {
            let s = table.get(k, bundle.regime(p, k));
            let o = &mut path[k * m..(k + 1) * m];
            let u: Vec<T> = joined(c.u1.at(p, k), c.u2.at(p, k)).collect();
            add_mv(o, &s.b.transpose(), c.y.at(p, k));
            for i in 0..d {
                add_mz(o, &s.d[i].transpose(), c.z.at(p, k), i, d);
            }
            add_mv(o, &s.s, c.x.at(p, k));
            add_mv(o, &s.r, &u);
        }
    });
    Ok(out)
}

/// Bᵀy + Dᵀz + Sx + Ru per path and node, `n_paths × n_nodes × m`.
pub fn stationarity_field<T: Scalar>(prob: &LqProblem<T>, c: &Candidate<T>, bundle: &DriverBundle<T>) -> Result<PathSet<T>> {
    let table = Table::build(prob, &bundle.grid, bundle.m())?;
    stationarity_paths(prob, &table, c, bundle)
}

/// Weighted L^{2,K} norm of Bᵀy + Dᵀz + Sx + Ru over the ensemble.
pub fn stationarity_residual<T: Scalar>(prob: &LqProblem<T>, c: &Candidate<T>, bundle: &DriverBundle<T>) -> Result<T> {
    let table = Table::build(prob, &bundle.grid, bundle.m())?;
    let st = stationarity_paths(prob, &table, c, bundle)?;
    Ok(weighted_l2k_norm(&st, prob.k, &bundle.grid)?.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AssumptionPolicy {
    /// Refuse to solve when the zero-sum pattern fails.
    Enforce,
    /// Solve anyway and keep the verdict in the solution.
    ReportOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct GameOptions<T> {
    pub continuation: ContinuationOptions<T>,
    pub policy: AssumptionPolicy,
    pub gamma_mode: GammaHomotopy,
}

impl<T: Scalar> GameOptions<T> {
    pub fn new(tol: T, max_iter: usize, seed: u64) -> Self {
        Self {
            continuation: ContinuationOptions::new(tol, max_iter, seed),
            policy: AssumptionPolicy::Enforce,
            gamma_mode: GammaHomotopy::Scaled,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GameSolution<T: Scalar> {
    pub u1: PathSet<T>,
    pub u2: PathSet<T>,
    /// State x* and adjoint (y*, z*, r*, f*).
    pub theta: Theta<T>,
    pub value: CostEstimate<T>,
    pub stationarity: T,
    pub u1_norm: T,
    pub u2_norm: T,
    pub kappa_x: T,
    pub k_max: T,
    pub assumption_d: AssumptionDReport,
    pub k_conditions: KConditions,
    pub trace: ContinuationTrace,
}

impl<T: Scalar> GameSolution<T> {
    pub fn candidate(&self) -> Candidate<'_, T> {
        Candidate { u1: &self.u1, u2: &self.u2, x: &self.theta.x, y: &self.theta.y, z: &self.theta.z }
    }
}

/// Checks admissibility and the weight conditions, solves the Hamiltonian system by
/// continuation and recovers u* = −R⁻¹(Bᵀy* + Dᵀz* + Sx*).
pub fn solve_game<T: Scalar>(prob: &LqProblem<T>, bundle: &DriverBundle<T>, opts: &GameOptions<T>) -> Result<GameSolution<T>> {
    let probes = probe_set(&bundle.grid, bundle.m());
    let kappa_x = compute_kappa_x(prob, &probes)?;
    let k_max = admissible_k_bound(prob, kappa_x, &probes)?;
    let assumption_d = check_assumption_d(prob, &probes)?;
    if opts.policy == AssumptionPolicy::Enforce && !assumption_d.zero_sum_pattern {
        return Err(Error::Assumption(format!("zero-sum pattern fails: {}", assumption_d.details.join("; "))));
    }
    let system = assemble_coupled_system(prob, &bundle.grid, bundle.m())?;
    let spec = system.spec(opts.gamma_mode)?;
    let k_conditions = spec.k_conditions();
    let (theta, trace) = solve_fbsde(&spec, bundle, &opts.continuation)?;
    let (u1, u2) = system.controls(&theta, bundle);
    let table = Table::build(prob, &bundle.grid, bundle.m())?;
    let (_, _, value) = cost_with(prob, &table, &u1, &u2, bundle)?;
    let cand = Candidate { u1: &u1, u2: &u2, x: &theta.x, y: &theta.y, z: &theta.z };
    let st = stationarity_paths(prob, &table, &cand, bundle)?;
    let stationarity = weighted_l2k_norm(&st, prob.k, &bundle.grid)?.value;
    let u1_norm = weighted_l2k_norm(&u1, prob.k, &bundle.grid)?.value;
    let u2_norm = weighted_l2k_norm(&u2, prob.k, &bundle.grid)?.value;
    Ok(GameSolution {
        u1,
        u2,
        theta,
        value,
        stationarity,
        u1_norm,
        u2_norm,
        kappa_x,
        k_max,
        assumption_d,
        k_conditions,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Player {
    Minimiser,
    Maximiser,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaddleEntry {
    pub perturbation: usize,
    pub player: Player,
    pub eps: f64,
    /// J(u* + εv) − J(u*) from paired paths.
    pub delta_j: f64,
    /// Three standard errors of the paired difference.
    pub band: f64,
    /// ε E∫ e^{2Ks} ⟨stationarity block, v⟩ ds.
    pub first_order: f64,
    pub first_band: f64,
    /// ½ε² E∫ e^{2Ks} ⟨Π(x₁, v), (x₁, v)⟩ ds with x₁ the variational state.
    pub second_order: f64,
    pub second_band: f64,
    pub violation: bool,
    pub first_order_outside: bool,
    pub second_order_wrong_sign: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaddleReport {
    pub entries: Vec<SaddleEntry>,
    pub violations: usize,
    pub first_order_outside: usize,
    pub second_order_wrong_sign: usize,
}

impl SaddleReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.first_order_outside == 0 && self.second_order_wrong_sign == 0
    }
}

/// Random adapted perturbation e^{−λs}(a₀ + a₁ sin ωs + a₂ W₁(s)) per control component.
fn perturbation<T: Scalar>(dim: usize, seed: u64, index: u64, bundle: &DriverBundle<T>, w1: Option<&PathSet<T>>) -> PathSet<T> {
    let mut rng = substream(seed, StreamTag::Perturbation, index);
    let params: Vec<[T; 5]> = (0..dim)
        .map(|_| {
            let lambda = T::lit(rng.gen_range(0.5..2.0));
            let omega = T::lit(rng.gen_range(0.5..3.0));
            [lambda, omega, normal(&mut rng), normal(&mut rng), normal(&mut rng)]
        })
        .collect();
    let grid = bundle.grid;
    let mut v = PathSet::zeros(bundle.n_paths(), grid.n_nodes(), dim);
    v.par_fill(|p, path| {
        for k in 0..grid.n_nodes() {
            let s = grid.node(k) - grid.t0();
            let w = w1.map_or(T::zero(), |w| w.get(p, k, 0));
            for (c, [l, om, a0, a1, a2]) in params.iter().enumerate() {
                path[k * dim + c] = (-*l * s).exp() * (*a0 + *a1 * (*om * s).sin() + *a2 * w);
            }
        }
    });
    v
}

/// Perturbs each player's control around the solution and checks the saddle
/// inequalities, the vanishing first-order term and the sign of the second-order term.
pub fn saddle_check<T: Scalar>(
    prob: &LqProblem<T>,
    sol: &GameSolution<T>,
    n_perturbations: usize,
    eps: &[T],
    seed: u64,
    bundle: &DriverBundle<T>,
) -> Result<SaddleReport> {
    check_controls(prob, &sol.u1, &sol.u2, bundle)?;
    let table = Table::build(prob, &bundle.grid, bundle.m())?;
    let (x_star, base, _) = cost_with(prob, &table, &sol.u1, &sol.u2, bundle)?;
    let st = stationarity_paths(prob, &table, &sol.candidate(), bundle)?;
    let w = bundle.grid.discounted_weights(prob.k);
    let levels = (bundle.brownian_dim() > 0).then(|| bundle.brownian_levels());
    let three = T::lit(3.0);
    let floor = T::lit(1e-12);
    let (m1, m2, n) = (prob.m1, prob.m2, prob.n);
    let mut entries = Vec::new();
    for j in 0..n_perturbations {
        for player in [Player::Minimiser, Player::Maximiser] {
            let (dim, offset) = match player {
                Player::Minimiser => (m1, 0),
                Player::Maximiser => (m2, m1),
            };
            if dim == 0 {
                continue;
            }
            let tag = 2 * j as u64 + u64::from(player == Player::Maximiser);
            let v = perturbation(dim, seed, tag, bundle, levels.as_ref());
            let first_paths: Vec<T> = (0..bundle.n_paths())
                .map(|p| {
                    w.iter().enumerate().fold(T::zero(), |acc, (k, wk)| {
                        let s = &st.at(p, k)[offset..offset + dim];
                        acc + *wk * s.iter().zip(v.at(p, k)).fold(T::zero(), |a, (x, y)| a + *x * *y)
                    })
                })
                .collect();
            let (first_unit, first_se) = mean_se(&first_paths);
            for &e in eps {
                let mut u1 = sol.u1.clone();
                let mut u2 = sol.u2.clone();
                match player {
                    Player::Minimiser => u1.axpy(e, &v)?,
                    Player::Maximiser => u2.axpy(e, &v)?,
                }
                let (x_eps, costs, _) = cost_with(prob, &table, &u1, &u2, bundle)?;
                let diff: Vec<T> = costs.iter().zip(&base).map(|(a, b)| *a - *b).collect();
                let (dj, dj_se) = mean_se(&diff);
                let band = three * dj_se + floor;
                let second_paths: Vec<T> = if e == T::zero() {
                    vec![T::zero(); bundle.n_paths()]
                } else {
                    (0..bundle.n_paths())
                        .map(|p| {
                            let mut acc = T::zero();
                            for (k, wk) in w.iter().enumerate() {
                                let s = table.get(k, bundle.regime(p, k));
                                let x1 = DVector::from_iterator(
                                    n,
                                    x_eps.at(p, k).iter().zip(x_star.at(p, k)).map(|(a, b)| (*a - *b) / e),
                                );
                                let vv = DVector::from_column_slice(v.at(p, k));
                                let sj = s.s.rows(offset, dim);
                                let rjj = s.r.view((offset, offset), (dim, dim));
                                acc += *wk
                                    * (x1.dot(&(&s.q * &x1))
                                        + T::lit(2.0) * vv.dot(&(sj * &x1))
                                        + vv.dot(&(rjj * &vv)));
                            }
                            T::lit(0.5) * e * e * acc
                        })
                        .collect()
                };
                let (second, second_se) = mean_se(&second_paths);
                let second_band = three * second_se + floor;
                let first = e * first_unit;
                let first_band = three * e.abs() * first_se + floor;
                let (violation, wrong_sign) = match player {
                    Player::Minimiser => (dj < -band, second < -second_band),
                    Player::Maximiser => (dj > band, second > second_band),
                };
                entries.push(SaddleEntry {
                    perturbation: j,
                    player,
                    eps: e.as_f64(),
                    delta_j: dj.as_f64(),
                    band: band.as_f64(),
                    first_order: first.as_f64(),
                    first_band: first_band.as_f64(),
                    second_order: second.as_f64(),
                    second_band: second_band.as_f64(),
                    violation,
                    first_order_outside: first.abs() > first_band,
                    second_order_wrong_sign: wrong_sign,
                });
            }
        }
    }
    let count = |f: fn(&SaddleEntry) -> bool| entries.iter().filter(|e| f(e)).count();
    Ok(SaddleReport {
        violations: count(|e| e.violation),
        first_order_outside: count(|e| e.first_order_outside),
        second_order_wrong_sign: count(|e| e.second_order_wrong_sign),
        entries,
    })
}

/// The affine substitution ũ = u + G x with G = R⁻¹S.
#[derive(Clone)]
pub struct ControlMap<T: Scalar> {
    pub gain: MatrixFn<T>,
    m1: usize,
    m2: usize,
}

impl<T: Scalar> ControlMap<T> {
    fn apply(
        &self,
        sign: T,
        u1: &PathSet<T>,
        u2: &PathSet<T>,
        x: &PathSet<T>,
        bundle: &DriverBundle<T>,
    ) -> Result<(PathSet<T>, PathSet<T>)> {
        let (m1, m2) = (self.m1, self.m2);
        let m = m1 + m2;
        let (np, nodes) = (x.n_paths(), x.n_nodes());
        if u1.n_paths() != np || u2.n_paths() != np || u1.dim() != m1 || u2.dim() != m2 || nodes != bundle.grid.n_nodes() {
            return Err(Error::Consistency("control map inputs do not share a shape".into()));
        }
        let gains: Vec<DMatrix<T>> = (0..nodes)
            .flat_map(|k| (0..bundle.m()).map(move |i| (k, i)))
            .map(|(k, i)| (self.gain)(bundle.grid.node(k), i))
            .collect();
        let mut out = PathSet::zeros(np, nodes, m);
        out.par_fill(|p, path| {
            for k in 0..nodes {
                let o = &mut path[k * m..(k + 1) * m];
                for (slot, v) in o.iter_mut().zip(joined(u1.at(p, k), u2.at(p, k))) {
                    *slot = v;
                }
                let g = &gains[k * bundle.m() + bundle.regime(p, k)];
                let mut gx = vec![T::zero(); m];
                add_mv(&mut gx, g, x.at(p, k));
                for (slot, v) in o.iter_mut().zip(gx) {
                    *slot += sign * v;
                }
            }
        });
        Ok(split(&out, m1, m2))
    }

    /// ũ = u + G x.
    pub fn to_tilde(
        &self,
        u1: &PathSet<T>,
        u2: &PathSet<T>,
        x: &PathSet<T>,
        bundle: &DriverBundle<T>,
    ) -> Result<(PathSet<T>, PathSet<T>)> {
        self.apply(T::one(), u1, u2, x, bundle)
    }

    /// u = ũ − G x.
    pub fn from_tilde(
        &self,
        u1: &PathSet<T>,
        u2: &PathSet<T>,
        x: &PathSet<T>,
        bundle: &DriverBundle<T>,
    ) -> Result<(PathSet<T>, PathSet<T>)> {
        self.apply(-T::one(), u1, u2, x, bundle)
    }

    pub fn is_identity(&self, probes: &[(T, usize)]) -> bool {
        probes.iter().all(|&(t, i)| (self.gain)(t, i).iter().all(|v| *v == T::zero()))
    }
}

fn inverse_or_nan<T: Scalar>(r: DMatrix<T>) -> DMatrix<T> {
    let (a, b) = r.shape();
    r.try_inverse().unwrap_or_else(|| DMatrix::from_element(a, b, T::lit(f64::NAN)))
}

/// Rewrites the problem in ũ = u + R⁻¹Sx: Ã = A − BR⁻¹S, C̃ᵢ = Cᵢ − DᵢR⁻¹S,
/// Q̃ = Q − SᵀR⁻¹S, S̃ = 0, everything else unchanged.
pub fn cross_term_reduce<T: Scalar>(prob: &LqProblem<T>, probes: &[(T, usize)]) -> Result<(LqProblem<T>, ControlMap<T>)> {
    require_probes(probes)?;
    for &(t, i) in probes {
        if prob.snapshot(t, i)?.r.try_inverse().is_none() {
            return Err(Error::SingularWeight(format!("R not invertible at t = {}, regime {}", t.as_f64(), i + 1)));
        }
    }
    let base = Arc::new(prob.clone());
    let snap = {
        let base = base.clone();
        move |t: T, i: usize| base.snapshot(t, i).expect("coefficients validated on the probe set")
    };
    let snap = Arc::new(snap);
    let gain: MatrixFn<T> = {
        let snap = snap.clone();
        Arc::new(move |t, i| {
            let s = snap(t, i);
            inverse_or_nan(s.r) * s.s
        })
    };
    let mut out = prob.clone();
    out.a = {
        let (snap, gain) = (snap.clone(), gain.clone());
        Arc::new(move |t, i| {
            let s = snap(t, i);
            &s.a - &s.b * gain(t, i)
        })
    };
    out.c = (0..prob.d)
        .map(|idx| {
            let (snap, gain) = (snap.clone(), gain.clone());
            let f: MatrixFn<T> = Arc::new(move |t, i| {
                let s = snap(t, i);
                &s.c[idx] - &s.d[idx] * gain(t, i)
            });
            f
        })
        .collect();
    out.q = {
        let (snap, gain) = (snap.clone(), gain.clone());
        Arc::new(move |t, i| {
            let s = snap(t, i);
            &s.q - s.s.transpose() * gain(t, i)
        })
    };
    out.s1 = constant(DMatrix::zeros(prob.m1, prob.n));
    out.s2 = constant(DMatrix::zeros(prob.m2, prob.n));
    Ok((out, ControlMap { gain, m1: prob.m1, m2: prob.m2 }))
}
