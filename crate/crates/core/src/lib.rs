pub mod aggregation;
pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod gam;
pub mod io;
pub mod kalman;
mod linalg;
pub mod splines;
pub mod synthgen;
pub mod transfer;

pub use error::{Error, Result};
