//! Metric-free natural gradient training for deep Boltzmann machines.

pub mod cli;
pub mod error;
pub mod eval;
pub mod inference;
pub mod metric;
pub mod model;
pub mod optim;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use model::{DbmModel, EnergyModel, GenericBm, JointState, ParamLayout, ParamVector};
