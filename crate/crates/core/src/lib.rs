pub mod diagnostics;
pub mod drag;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod patch;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
