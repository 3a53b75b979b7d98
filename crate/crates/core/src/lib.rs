//! Depth estimation by non-parametric transfer from an RGBD database, and
//! stereoscopic rendering from the estimated depth.

pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod io;
pub mod align;
pub mod cli;
pub mod database;
pub mod motionseg;
pub mod optimizer;
pub mod raster;
pub mod synthetic;
pub mod viewsynth;

pub use error::{Error, Result};
