#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod checkpoint;
pub mod density;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
