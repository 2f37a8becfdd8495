//! Neural sequence chunking: segmentation followed by labeling.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;

pub use error::{Error, Result};
