//! Scenario files: schema, validation and command-line overrides.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fbsde_core::drivers::GeneratorMatrix;
use fbsde_core::timegrid::{Hurst, TimeGrid};
use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::expr::{Env, Expr, Var};
use crate::params;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Drivers,
    Calculus,
    Forward,
    Backward,
    Coupled,
    Lqgame,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Drivers => "drivers",
            Target::Calculus => "calculus",
            Target::Forward => "forward",
            Target::Backward => "backward",
            Target::Coupled => "coupled",
            Target::Lqgame => "lqgame",
        }
    }

    /// Names accepted in `checks`.
    pub fn checks(self) -> &'static [&'static str] {
        match self {
            Target::Drivers => &["fbm_covariance", "brownian_variance", "martingale_mean"],
            Target::Calculus => &["centred", "order"],
            Target::Forward => &["picard_contraction", "decay", "divergent_k", "apriori", "apriori_stability"],
            Target::Backward => &["y0", "level_ratio", "estimate", "stability"],
            Target::Coupled => &["reaches_one", "residual", "delta_rule", "sequential_oracle"],
            Target::Lqgame => &["zero_saddle", "saddle", "stationarity", "cross_term_roundtrip", "cost_identity"],
        }
    }

    /// Coefficient names and the identifiers each may use.
    fn coefficients(self) -> &'static [(&'static str, &'static [Var])] {
        const SDE: &[Var] = &[Var::T, Var::X, Var::Regime];
        const TIME: &[Var] = &[Var::T];
        const NONE: &[Var] = &[];
        const DRIVER: &[Var] = &[Var::T, Var::Y, Var::Z, Var::R, Var::F, Var::Regime];
        const THETA: &[Var] = &[Var::T, Var::X, Var::Y, Var::Z, Var::R, Var::F, Var::Regime];
        const PSI: &[Var] = &[Var::Y, Var::Regime];
        const MAT: &[Var] = &[Var::T, Var::Regime];
        match self {
            Target::Drivers => &[],
            Target::Calculus => &[("b", SDE), ("sigma", SDE), ("gamma", TIME)],
            Target::Forward => &[
                ("b", SDE),
                ("sigma", SDE),
                ("gamma", TIME),
                ("x0", NONE),
                ("b_bar", SDE),
                ("sigma_bar", SDE),
                ("gamma_bar", TIME),
            ],
            Target::Backward => &[("g", DRIVER), ("g_bar", DRIVER)],
            Target::Coupled => &[
                ("psi", PSI),
                ("b", THETA),
                ("sigma", THETA),
                ("g", THETA),
                ("gamma", TIME),
                ("x0", NONE),
            ],
            Target::Lqgame => &[
                ("A", MAT),
                ("B1", MAT),
                ("B2", MAT),
                ("C", MAT),
                ("D1", MAT),
                ("D2", MAT),
                ("gamma_fbm", TIME),
                ("Q", MAT),
                ("S1", MAT),
                ("S2", MAT),
                ("R11", MAT),
                ("R12", MAT),
                ("R21", MAT),
                ("R22", MAT),
                ("x0", NONE),
            ],
        }
    }

    fn scalar_only(self) -> bool {
        !matches!(self, Target::Lqgame)
    }
}

/// A coefficient: one expression, a nested list (vector or matrix rows), or one entry per regime.
#[derive(Clone, Debug, PartialEq)]
pub enum Coef {
    Expr(Expr),
    List(Vec<Coef>),
    PerRegime(Vec<Coef>),
}

impl Coef {
    pub fn zero() -> Self {
        Coef::Expr(Expr::constant(0.0))
    }

    pub fn constant(v: f64) -> Self {
        Coef::Expr(Expr::constant(v))
    }

    fn pick(&self, regime: usize) -> &Coef {
        match self {
            Coef::PerRegime(v) => v[regime].pick(regime),
            c => c,
        }
    }

    /// Value of a scalar coefficient.
    pub fn scalar(&self, env: &Env) -> f64 {
        match self.pick(env.regime) {
            Coef::Expr(e) => e.eval(env),
            _ => f64::NAN,
        }
    }

    /// A scalar is 1×1, a flat list is a column, a list of lists is a row-major matrix.
    pub fn matrix(&self, env: &Env) -> DMatrix<f64> {
        match self.pick(env.regime) {
            Coef::Expr(e) => DMatrix::from_element(1, 1, e.eval(env)),
            Coef::List(items) => {
                if items.iter().all(|c| matches!(c, Coef::Expr(_))) {
                    DMatrix::from_iterator(items.len(), 1, items.iter().map(|c| c.scalar(env)))
                } else {
                    let rows: Vec<Vec<f64>> = items
                        .iter()
                        .map(|row| match row {
                            Coef::List(r) => r.iter().map(|c| c.scalar(env)).collect(),
                            c => vec![c.scalar(env)],
                        })
                        .collect();
                    let cols = rows.first().map_or(0, |r| r.len());
                    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
                }
            }
            Coef::PerRegime(_) => unreachable!("pick resolves regimes"),
        }
    }

    /// (rows, cols) of the value, identical across regimes.
    pub fn shape(&self) -> std::result::Result<(usize, usize), String> {
        match self {
            Coef::Expr(_) => Ok((1, 1)),
            Coef::PerRegime(v) => {
                let shapes: Vec<_> = v.iter().map(|c| c.shape()).collect::<std::result::Result<_, _>>()?;
                if shapes.windows(2).any(|w| w[0] != w[1]) {
                    return Err("per-regime entries have different shapes".into());
                }
                shapes.first().copied().ok_or_else(|| "per_regime list is empty".into())
            }
            Coef::List(items) => {
                if items.is_empty() {
                    return Err("empty list".into());
                }
                if items.iter().all(|c| matches!(c, Coef::Expr(_))) {
                    return Ok((items.len(), 1));
                }
                let mut cols = None;
                for row in items {
                    let n = match row {
                        Coef::List(r) if r.iter().all(|c| matches!(c, Coef::Expr(_))) => r.len(),
                        _ => return Err("matrix rows must be lists of expressions".into()),
                    };
                    if *cols.get_or_insert(n) != n {
                        return Err("matrix rows have different lengths".into());
                    }
                }
                Ok((items.len(), cols.unwrap_or(0)))
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum RawCoef {
    Num(f64),
    Expr(String),
    List(Vec<RawCoef>),
    PerRegime(RawPerRegime),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerRegime {
    per_regime: Vec<RawCoef>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    #[serde(default)]
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    n_paths: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegimes {
    m: usize,
    generator: Vec<Vec<f64>>,
    /// 1-based starting state.
    #[serde(default = "one")]
    initial: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    label: String,
    #[serde(default, alias = "H")]
    hurst: Option<f64>,
    #[serde(rename = "K", default)]
    k: Option<f64>,
    #[serde(default)]
    grid: Option<RawGrid>,
    #[serde(default)]
    regimes: Option<RawRegimes>,
    #[serde(default)]
    coefficients: BTreeMap<String, RawCoef>,
    #[serde(default)]
    params: Map<String, Value>,
    #[serde(default)]
    checks: Option<Vec<String>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    target: Target,
    #[serde(default)]
    description: Option<String>,
    grid: RawGrid,
    mc: RawMc,
    #[serde(default = "default_hurst", alias = "H")]
    hurst: f64,
    #[serde(rename = "K", default)]
    k: f64,
    #[serde(default)]
    regimes: Option<RawRegimes>,
    #[serde(default = "one")]
    brownian_dim: usize,
    #[serde(default)]
    coefficients: BTreeMap<String, RawCoef>,
    #[serde(default)]
    params: Map<String, Value>,
    #[serde(default)]
    cases: Vec<RawCase>,
    #[serde(default)]
    checks: Vec<String>,
}

fn one() -> usize {
    1
}

fn default_hurst() -> f64 {
    0.7
}

/// One fully resolved run: the scenario itself or one of its cases.
#[derive(Clone, Debug)]
pub struct Setup {
    pub label: Option<String>,
    pub grid: TimeGrid<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub hurst: Hurst<f64>,
    pub k: f64,
    pub generator: GeneratorMatrix<f64>,
    /// 0-based.
    pub initial_regime: usize,
    pub brownian_dim: usize,
    pub coefficients: BTreeMap<String, Coef>,
    pub params: Value,
    pub checks: Vec<String>,
}

impl Setup {
    pub fn coef(&self, name: &str) -> Coef {
        self.coefficients.get(name).cloned().unwrap_or_else(Coef::zero)
    }

    pub fn has(&self, name: &str) -> bool {
        self.coefficients.contains_key(name)
    }

    pub fn wants(&self, check: &str) -> bool {
        self.checks.iter().any(|c| c == check)
    }

    pub fn params<P: DeserializeOwned>(&self) -> Result<P> {
        from_value_at(&self.params, "params")
    }

    /// Prefix for artifact and result keys.
    pub fn key(&self, artifact: &str) -> String {
        match &self.label {
            Some(l) => format!("{l}-{artifact}"),
            None => artifact.to_string(),
        }
    }

    pub fn m(&self) -> usize {
        self.generator.m()
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub target: Target,
    pub description: Option<String>,
    pub setups: Vec<Setup>,
}

/// Command-line replacements for grid and Monte Carlo settings.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

impl Scenario {
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        for s in &mut self.setups {
            let t0 = s.grid.t0();
            let t_end = o.horizon.map_or(s.grid.t_end(), |h| t0 + h);
            let steps = o.steps.unwrap_or(s.grid.n_steps());
            s.grid = TimeGrid::new(t0, t_end, steps).map_err(|e| anyhow!("override: {e}"))?;
            if let Some(p) = o.paths {
                if p < 2 {
                    bail!("override: --paths must be at least 2");
                }
                s.n_paths = p;
            }
            if let Some(seed) = o.seed {
                s.seed = seed;
            }
        }
        Ok(self)
    }
}

pub(crate) fn from_value_at<P: DeserializeOwned>(v: &Value, prefix: &str) -> Result<P> {
    serde_path_to_error::deserialize(v.clone()).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { prefix.to_string() } else { format!("{prefix}.{path}") };
        anyhow!("{at}: {}", e.inner())
    })
}

/// Reads and validates a scenario file.
pub fn parse_problem(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_str(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_str(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawScenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            anyhow!("{}", e.inner())
        } else {
            anyhow!("{path}: {}", e.inner())
        }
    })?;
    resolve(raw)
}

fn resolve(raw: RawScenario) -> Result<Scenario> {
    if raw.name.is_empty() || !raw.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        bail!("name: must be non-empty and use only letters, digits, `-` and `_`");
    }
    let target = raw.target;
    let base_regimes = raw.regimes.clone();
    let mut setups = Vec::new();
    if raw.cases.is_empty() {
        setups.push(build_setup(
            target,
            None,
            &raw.grid,
            &raw.mc,
            raw.hurst,
            raw.k,
            base_regimes.as_ref(),
            raw.brownian_dim,
            &raw.coefficients,
            &raw.params,
            &raw.checks,
            "",
        )?);
    } else {
        let mut labels = BTreeSet::new();
        for (i, c) in raw.cases.iter().enumerate() {
            let at = format!("cases[{i}].");
            if c.label.is_empty() || !c.label.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
                bail!("{at}label: must be non-empty and use only letters, digits, `-` and `_`");
            }
            if !labels.insert(c.label.clone()) {
                bail!("{at}label: duplicate case label `{}`", c.label);
            }
            let mut coefs = raw.coefficients.clone();
            coefs.extend(c.coefficients.clone());
            let mut params = raw.params.clone();
            params.extend(c.params.clone());
            setups.push(build_setup(
                target,
                Some(c.label.clone()),
                c.grid.as_ref().unwrap_or(&raw.grid),
                &raw.mc,
                c.hurst.unwrap_or(raw.hurst),
                c.k.unwrap_or(raw.k),
                c.regimes.as_ref().or(base_regimes.as_ref()),
                raw.brownian_dim,
                &coefs,
                &params,
                c.checks.as_ref().unwrap_or(&raw.checks),
                &at,
            )?);
        }
    }
    Ok(Scenario { name: raw.name, target, description: raw.description, setups })
}

#[allow(clippy::too_many_arguments)]
fn build_setup(
    target: Target,
    label: Option<String>,
    grid: &RawGrid,
    mc: &RawMc,
    hurst: f64,
    k: f64,
    regimes: Option<&RawRegimes>,
    brownian_dim: usize,
    coefficients: &BTreeMap<String, RawCoef>,
    params: &Map<String, Value>,
    checks: &[String],
    at: &str,
) -> Result<Setup> {
    let grid = TimeGrid::new(grid.t0, grid.t_end, grid.n_steps).map_err(|e| anyhow!("{at}grid: {e}"))?;
    if mc.n_paths < 2 {
        bail!("mc.n_paths: need at least 2 paths, got {}", mc.n_paths);
    }
    let hurst = Hurst::new(hurst).map_err(|e| anyhow!("{at}hurst: {e}"))?;
    if !k.is_finite() {
        bail!("{at}K: must be finite");
    }
    let (generator, initial) = match regimes {
        None => (GeneratorMatrix::trivial(), 0),
        Some(r) => {
            let q = GeneratorMatrix::new(&r.generator).map_err(|e| anyhow!("{at}regimes.generator: {e}"))?;
            if q.m() != r.m {
                bail!("{at}regimes.m: {} does not match the {}×{} generator", r.m, q.m(), q.m());
            }
            if r.initial < 1 || r.initial > r.m {
                bail!("{at}regimes.initial: {} outside 1..={}", r.initial, r.m);
            }
            (q, r.initial - 1)
        }
    };
    if brownian_dim != 1 && target != Target::Lqgame && target != Target::Drivers {
        bail!("brownian_dim: target `{}` supports one Brownian component", target.name());
    }
    let allowed = target.coefficients();
    let mut coefs = BTreeMap::new();
    for (name, raw) in coefficients {
        let Some((_, vars)) = allowed.iter().find(|(n, _)| n == name) else {
            let known: Vec<_> = allowed.iter().map(|(n, _)| *n).collect();
            bail!(
                "{at}coefficients.{name}: unknown coefficient for target `{}` (expected one of: {})",
                target.name(),
                if known.is_empty() { "none".to_string() } else { known.join(", ") }
            );
        };
        let c = convert(raw, vars, generator.m(), &format!("{at}coefficients.{name}"))?;
        if target.scalar_only() && c.shape().map_err(|e| anyhow!("{at}coefficients.{name}: {e}"))? != (1, 1) {
            bail!("{at}coefficients.{name}: target `{}` takes scalar coefficients", target.name());
        }
        coefs.insert(name.clone(), c);
    }
    for c in checks {
        if !target.checks().contains(&c.as_str()) {
            bail!(
                "{at}checks: unknown check `{c}` for target `{}` (expected one of: {})",
                target.name(),
                target.checks().join(", ")
            );
        }
    }
    let params = Value::Object(params.clone());
    params::validate(target, &params).map_err(|e| anyhow!("{at}{e}"))?;
    Ok(Setup {
        label,
        grid,
        n_paths: mc.n_paths,
        seed: mc.seed,
        hurst,
        k,
        generator,
        initial_regime: initial,
        brownian_dim,
        coefficients: coefs,
        params,
        checks: checks.to_vec(),
    })
}

fn convert(raw: &RawCoef, vars: &[Var], m: usize, at: &str) -> Result<Coef> {
    Ok(match raw {
        RawCoef::Num(v) => Coef::constant(*v),
        RawCoef::Expr(s) => {
            let e = Expr::parse(s).map_err(|e| anyhow!("{at}: {e}"))?;
            e.restrict(vars).map_err(|e| anyhow!("{at}: {e}"))?;
            Coef::Expr(e)
        }
        RawCoef::List(items) => Coef::List(
            items
                .iter()
                .enumerate()
                .map(|(i, c)| convert(c, vars, m, &format!("{at}[{i}]")))
                .collect::<Result<_>>()?,
        ),
        RawCoef::PerRegime(p) => {
            if !vars.contains(&Var::Regime) {
                bail!("{at}: per_regime is not available for this coefficient");
            }
            if p.per_regime.len() != m {
                bail!("{at}.per_regime: {} entries for {m} regimes", p.per_regime.len());
            }
            Coef::PerRegime(
                p.per_regime
                    .iter()
                    .enumerate()
                    .map(|(i, c)| convert(c, vars, m, &format!("{at}.per_regime[{i}]")))
                    .collect::<Result<_>>()?,
            )
        }
    })
}
