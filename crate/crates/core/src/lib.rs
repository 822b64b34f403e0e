//! Class-incremental learning on a frozen dual encoder: per-task visual
//! adapters, a shared anchored text adapter, orthogonal compensation heads
//! and task-routed unified inference, with numerical oracles for the
//! underlying approximation theory.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`.

pub mod compensation;
pub mod encoder;
pub mod harness;
pub mod error;
pub mod ids;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod routing;
pub mod scalar;
pub mod state;
pub mod synthdata;
pub mod theory;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use ids::{ClassId, TaskId};
pub use scalar::Scalar;

pub type Matrix = numerics::RealMatrix<f64>;
pub type Vector = numerics::RealVector<f64>;
pub type Svd = numerics::SvdResult<f64>;
pub type Model = state::ModelState<f64>;
pub type Encoder = encoder::FrozenEncoder<f64>;
pub type Adapter = encoder::LowRankAdapter<f64>;
pub type Task = synthdata::TaskDataset<f64>;
pub type Breakdown = routing::ScoreBreakdown<f64>;
pub type Theory = theory::TheoryReport<f64>;
