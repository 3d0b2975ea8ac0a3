//! Deep backward solver for doubly reflected BSDEs and the two-player
//! stopping (Dynkin) games they price, with a grid oracle for one-dimensional
//! games, an OU calibration toolkit and a discrete Skorokhod reflection map.
//!
//! Numerical types are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod calibration;
pub mod error;
pub mod market;
pub mod neural;
pub mod oracle;
pub mod presets;
pub mod rng;
pub mod scalar;
pub mod skorokhod;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Game = solver::GameSpec<f64>;
pub type Game32 = solver::GameSpec<f32>;
pub type Solver = solver::TrainedSolver<f64>;
pub type Solver32 = solver::TrainedSolver<f32>;
pub type Paths = market::PathBatch<f64>;
pub type Paths32 = market::PathBatch<f32>;
pub type Mlp = neural::MlpParams<f64>;
pub type Mlp32 = neural::MlpParams<f32>;
pub type Ou = market::OUParams<f64>;
pub type Ou32 = market::OUParams<f32>;
