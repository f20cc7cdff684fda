pub mod attacks;
pub mod data;
pub mod dcor;
pub mod defenses;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod numerics;
pub mod protocol;

pub use error::{Error, Result};
