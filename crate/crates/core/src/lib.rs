pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod textprep;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
