//! Equivariant multi-agent motion prediction with invariant interaction
//! reasoning, trained end-to-end on synthetic particle systems.
pub mod certify;
pub mod error;
pub mod geometry;
pub mod json;
pub mod model;
pub mod numerics;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
