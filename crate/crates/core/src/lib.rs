pub mod ate;
pub mod design;
pub mod error;
pub mod iv;
pub mod matching;
pub mod numeric;
pub mod probability;
pub mod propensity;
pub mod sim;

pub use error::{Error, Result};
