#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod cli;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matching;
pub mod model;
pub mod numeric;
pub mod trainer;
pub mod types;

pub use error::{ConnaError, Result};
