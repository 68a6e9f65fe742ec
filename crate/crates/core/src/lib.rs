pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frequency;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod window;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use rainforge_tensor as tensor;
