pub mod autodiff;
pub mod cli;
pub mod driver;
pub mod error;
pub mod mesh;
pub mod network;
pub mod optimize;
pub mod physics;

pub use error::{Error, Result};
