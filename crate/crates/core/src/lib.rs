pub mod config;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod grounding;
pub mod index;
pub mod numeric;
pub mod quantizer;
pub mod seqmodel;
pub mod serving;
pub mod tokenizer;

pub use error::{Error, Result};

pub type ItemId = u32;
pub type UserId = u32;
