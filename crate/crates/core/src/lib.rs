pub mod error;
pub mod harness;
pub mod adapt;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod losses;
pub mod model;
pub mod selection;

pub use error::{Error, Result};
