//! Few-shot multi-task image-to-image translation on event-structured weather rasters.

mod error;
mod raster;

pub mod data;
pub mod nets;
pub mod objectives;
pub mod skillmetrics;
pub mod sslpretrain;
pub mod tasks;
pub mod trainloops;

pub use error::{Error, Result};
