pub mod container;
pub mod dsp;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod extract;
pub mod fixtures;
pub mod gradcheck;
pub mod mixture;
pub mod par;
pub mod pretrain;
pub mod probe;
pub mod report;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, ErrorClass, Result};
