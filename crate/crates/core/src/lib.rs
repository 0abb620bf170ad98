pub mod audio;
pub mod autodiff;
pub mod data;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod gcnn;
pub mod model;
pub mod sam;
pub mod train;

pub use error::{Error, Result};
