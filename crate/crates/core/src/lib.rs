pub mod config;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod neumf;
pub mod phantom;
pub mod pipeline;
pub mod rnmf;
pub mod roi;
pub mod segment;
pub mod video;

pub use error::{Error, Result};
