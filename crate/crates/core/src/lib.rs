pub mod analysis;
pub mod case_study;
pub mod config;
pub mod design;
pub mod design_eval;
pub mod error;
pub mod exact;
pub mod map_prior;
pub mod mixture;
pub mod pool;
pub mod quadrature;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};
