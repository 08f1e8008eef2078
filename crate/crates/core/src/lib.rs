pub mod cli;
pub mod error;
pub mod fit;
pub mod likelihood;
pub mod models;
pub mod mvn;
pub mod partitions;
pub mod simulate;
pub mod study;

pub use error::{Error, Result};
