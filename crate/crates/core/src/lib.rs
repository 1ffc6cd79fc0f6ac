pub mod banded;
pub mod config;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod flowmap;
pub mod geometry;
pub mod greens;
pub mod output;
pub mod presets;
pub mod solver;
pub mod transport;
pub mod verification;
pub mod vertical;

pub use error::{QgError, Result};
