//! Teacher-assistant selection for knowledge distillation under large
//! capacity gaps.

pub mod data;
pub mod distiller;
pub mod error;
pub mod ledger;
pub mod model;
pub mod pruner;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
