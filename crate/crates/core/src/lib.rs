pub mod adapt;
pub mod annotation;
pub mod checkpoint;
pub mod correlation;
pub mod density;
pub mod error;
pub mod eval;
pub mod features;
pub mod head;
pub mod heatmap;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
