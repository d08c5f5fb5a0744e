pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod eval;
pub mod error;
pub mod kernel;
pub mod kvfile;
pub mod memory;
pub mod model;
pub mod objective;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
