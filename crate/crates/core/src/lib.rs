pub mod datagen;
pub mod error;
pub mod evalharness;
pub mod intervene;
pub mod models;
pub mod ndcompute;
pub mod realign;

pub use error::{Error, Result};
