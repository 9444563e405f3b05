//! Gradients, Adam and the training loop.

pub mod adam;
pub mod ext;
pub mod losses;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod train;
