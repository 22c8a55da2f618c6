pub mod error;
pub mod lattice;
pub mod metrics;
pub mod nn;
pub mod ordering;
pub mod samplers;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
