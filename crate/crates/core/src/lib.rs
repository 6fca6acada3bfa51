pub mod combinatorics;
pub mod error;
pub mod experiment;
pub mod expm;
pub mod hierarchy;
pub mod kinetic;
pub mod model;
pub mod montecarlo;
pub mod operators;
pub mod sector;

pub use error::{Error, Result};
