pub mod arena;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod mac;
pub mod model;
pub mod relation;

pub use error::{Error, Result};
