pub mod error;
pub mod fault;
pub mod imaging;
pub mod nn;

pub use error::{Error, Result};
pub mod curve;
pub mod diffusion;
pub mod models;
pub mod selfcheck;
pub mod training;
