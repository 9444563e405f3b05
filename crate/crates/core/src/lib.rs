//! Neural microfacet fields: a volume renderer whose every point carries a
//! density and a microfacet surface, and a trainer that recovers geometry,
//! materials and far-field lighting from posed images.

pub mod checkpoint;
pub mod envlight;
pub mod error;
pub mod field;
pub mod io;
pub mod materials;
pub mod math;
pub mod optim;
pub mod qmc;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
