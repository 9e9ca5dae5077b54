pub mod billiard;
pub mod constants;
pub mod error;
pub mod limit_chain;
pub mod paths;
pub mod stats;
pub mod stein;
pub mod vector;

pub use constants::{make_constants, ModelConstants};
pub use error::{Error, Result};
