pub mod accounting;
pub mod autograd;
pub mod cacnn;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod span;
pub mod trainer;

pub use error::{Error, Result};
