pub mod baselines;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod protocol;
pub mod seed;

pub use error::{Result, VfemError};
