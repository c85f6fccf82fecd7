pub mod dissim;
pub mod enrich;
pub mod error;
pub mod features;
pub mod field;
pub mod forest;
pub mod kernel;
pub mod pipeline;
pub mod registration;
pub mod seeds;
pub mod standardize;
pub mod strain;
pub mod surface;
pub mod synth;

pub use error::{Error, Result};
