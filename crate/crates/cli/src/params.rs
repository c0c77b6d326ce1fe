//! Typed `params` blocks, one per target.

use anyhow::Result;
use serde::Deserialize;
use serde_json::Value;

use crate::scenario::{from_value_at, Target};

fn five() -> f64 {
    5.0
}

fn csv_paths() -> usize {
    20
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriversParams {
    /// Node times of the covariance table; defaults to the grid end.
    #[serde(default)]
    pub nodes: Vec<f64>,
    #[serde(default = "five")]
    pub z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFn {
    Square,
    Identity,
    RegimeLabel,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalculusParams {
    #[serde(default = "square")]
    pub test_function: TestFn,
    #[serde(default)]
    pub window: Option<[f64; 2]>,
    /// Step counts for the convergence-order fit.
    #[serde(default)]
    pub refinements: Vec<usize>,
    #[serde(default)]
    pub refinement_paths: Option<usize>,
    #[serde(default = "five")]
    pub z: f64,
    #[serde(default)]
    pub min_order: Option<f64>,
}

fn square() -> TestFn {
    TestFn::Square
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConstantsParams {
    #[serde(default)]
    pub kappa_x: f64,
    #[serde(default)]
    pub l_bx: f64,
    #[serde(default)]
    pub l_sigma_x: f64,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardParams {
    pub a: f64,
    #[serde(default = "picard_tol")]
    pub tol: f64,
    #[serde(default = "fifty")]
    pub max_iter: usize,
    #[serde(default = "max_ratio")]
    pub max_ratio: f64,
}

fn picard_tol() -> f64 {
    1e-3
}

fn fifty() -> usize {
    50
}

fn max_ratio() -> f64 {
    0.30
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayParams {
    /// Time at which the weighted moment is compared with `threshold`.
    pub u: f64,
    pub threshold: f64,
    /// Strict decrease is required from this time on.
    #[serde(default)]
    pub monotone_from: f64,
    /// A discount that must be reported as divergent.
    #[serde(default)]
    pub divergent_k: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardParams {
    #[serde(default)]
    pub constants: ForwardConstantsParams,
    #[serde(default)]
    pub picard: Option<PicardParams>,
    #[serde(default)]
    pub decay: Option<DecayParams>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "csv_paths")]
    pub csv_paths: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    None,
    Drivers,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardParams {
    /// Increasing truncation levels; defaults to the grid end.
    #[serde(default)]
    pub schedule: Vec<f64>,
    #[serde(default = "cauchy_tol")]
    pub tol: f64,
    #[serde(default = "no_features")]
    pub features: Features,
    #[serde(default)]
    pub l_mono: f64,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub expected_y0: Option<f64>,
    #[serde(default = "y0_rel_tol")]
    pub y0_rel_tol: f64,
    #[serde(default)]
    pub expected_ratio: Option<f64>,
    #[serde(default = "half")]
    pub ratio_rel_tol: f64,
    #[serde(default = "csv_paths")]
    pub csv_paths: usize,
}

fn cauchy_tol() -> f64 {
    1e-12
}

fn no_features() -> Features {
    Features::None
}

fn y0_rel_tol() -> f64 {
    0.02
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    Scaled,
    Fixed,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupledParams {
    pub kappa_x: f64,
    pub kappa_y: f64,
    #[serde(default = "cont_tol")]
    pub tol: f64,
    #[serde(default = "forty")]
    pub max_iter: usize,
    #[serde(default = "scaled")]
    pub gamma_mode: GammaMode,
    #[serde(default = "milli")]
    pub residual_tol: f64,
    #[serde(default = "milli")]
    pub oracle_tol: f64,
    #[serde(default = "csv_paths")]
    pub csv_paths: usize,
}

fn cont_tol() -> f64 {
    1e-4
}

fn forty() -> usize {
    40
}

fn scaled() -> GammaMode {
    GammaMode::Scaled
}

fn milli() -> f64 {
    1e-3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Enforce,
    ReportOnly,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleParams {
    #[serde(default = "twenty")]
    pub n_perturbations: usize,
    #[serde(default = "eps_list")]
    pub eps: Vec<f64>,
}

fn twenty() -> usize {
    20
}

fn eps_list() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqParams {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    #[serde(default = "cont_tol")]
    pub tol: f64,
    #[serde(default = "forty")]
    pub max_iter: usize,
    #[serde(default = "enforce")]
    pub policy: Policy,
    #[serde(default = "scaled")]
    pub gamma_mode: GammaMode,
    #[serde(default = "centi")]
    pub control_tol: f64,
    #[serde(default = "micro")]
    pub stationarity_tol: f64,
    #[serde(default)]
    pub saddle: Option<SaddleParams>,
    #[serde(default)]
    pub cross_term: bool,
    #[serde(default = "milli")]
    pub roundtrip_tol: f64,
    #[serde(default = "csv_paths")]
    pub csv_paths: usize,
}

fn enforce() -> Policy {
    Policy::Enforce
}

fn centi() -> f64 {
    1e-2
}

fn micro() -> f64 {
    1e-6
}

/// Type-checks a `params` object against the target's schema.
pub fn validate(target: Target, v: &Value) -> Result<()> {
    match target {
        Target::Drivers => from_value_at::<DriversParams>(v, "params").map(drop),
        Target::Calculus => from_value_at::<CalculusParams>(v, "params").map(drop),
        Target::Forward => from_value_at::<ForwardParams>(v, "params").map(drop),
        Target::Backward => from_value_at::<BackwardParams>(v, "params").map(drop),
        Target::Coupled => from_value_at::<CoupledParams>(v, "params").map(drop),
        Target::Lqgame => from_value_at::<LqParams>(v, "params").map(drop),
    }
}
