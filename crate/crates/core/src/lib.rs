//! Continual learning for spiking networks by temporal development.
//!
//! The engine grows one column of four residual spiking blocks per task,
//! evolves sparse long-range connections from earlier columns into the new
//! one, and after each task feeds back an inhibition/pruning pass onto the
//! earlier columns, steered by Hebbian traces and by how much later tasks
//! reuse each block.
//!
//! All numerics that touch weights are generic over [`Scalar`] (`f32` for
//! training runs, `f64` for gradient checks). The concrete aliases below are
//! what the runner and CLI use.

mod container;
pub mod error;
pub mod evolution;
pub mod plasticity;
pub mod runner;
pub mod snn;
pub mod tasks;
pub mod topology;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub use error::{Error, Result};

/// Floating point type the network math runs on.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type LayerParams32 = snn::LayerParams<f32>;
pub type LayerParams64 = snn::LayerParams<f64>;

pub type ColumnGraph32 = topology::ColumnGraph<f32>;
pub type ColumnGraph64 = topology::ColumnGraph<f64>;

pub type Runner32 = runner::Runner<f32>;
pub type Runner64 = runner::Runner<f64>;
