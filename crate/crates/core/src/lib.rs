pub mod error;
pub mod evaluation;
pub mod graphs;
pub mod grid;
pub mod healpix;
pub mod io;
pub mod model;
pub mod nn;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
