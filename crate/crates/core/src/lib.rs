pub mod barrier;
pub mod certify;
pub mod control;
pub mod error;
pub mod expr;
pub mod interval;
pub mod patch;
pub mod pipeline;
pub mod problem;
pub mod verifier;

pub use error::{Error, Result};
