pub mod csbm;
pub mod error;
pub mod gnn;
pub mod numerics;
pub mod ot;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
