pub mod attention;
pub mod autodiff;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod record;
pub mod region_query;
pub mod tensor;

pub use error::{Error, Result};
