pub mod backbone;
pub mod coarse;
pub mod config;
pub mod error;
pub mod eval;
pub mod fine;
pub mod geometry;
pub mod io;
pub mod model;
pub mod params;
pub mod rope;
pub mod supervision;
pub mod synth;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
