//! Infinite-horizon forward-backward SDEs driven by Brownian motion, fractional
//! Brownian motion (H > 1/2) and a regime-switching Markov chain, with a
//! two-player zero-sum linear-quadratic game built on top.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`.

pub mod backward;
pub mod calculus;
pub mod coupled;
pub mod drivers;
pub mod error;
pub mod forward;
pub mod lqgame;
pub mod paths;
pub mod scalar;
pub mod timegrid;

pub use error::{Error, Result, TraceStep};
pub use scalar::Scalar;

pub type TimeGrid = timegrid::TimeGrid<f64>;
pub type Hurst = timegrid::Hurst<f64>;
pub type PathSet = paths::PathSet<f64>;
pub type GeneratorMatrix = drivers::GeneratorMatrix<f64>;
pub type DriverConfig = drivers::DriverConfig<f64>;
pub type DriverBundle = drivers::DriverBundle<f64>;
pub type PathSolution = forward::PathSolution<f64>;
pub type BackwardSolution = backward::BackwardSolution<f64>;
pub type Theta = coupled::Theta<f64>;
pub type ContinuationOptions = coupled::ContinuationOptions<f64>;
pub type LqProblem = lqgame::LqProblem<f64>;
pub type GameSolution = lqgame::GameSolution<f64>;
pub type GameOptions = lqgame::GameOptions<f64>;
