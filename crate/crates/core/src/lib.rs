pub mod assign;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod him;
pub mod loss;
pub mod model;
pub mod numcore;
pub mod qaff;
pub mod scenesim;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
