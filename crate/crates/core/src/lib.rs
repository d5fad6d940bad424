pub mod diffusion;
pub mod error;
pub mod eval;
pub mod influence;
pub mod knn;
pub mod kv;
pub mod rng;
pub mod sketch;
pub mod store;

pub use error::{Error, ErrorKind, Result};
