pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
