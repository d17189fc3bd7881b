pub mod dataset;
pub mod descriptors;
pub mod error;
pub mod nets;
pub mod optflow;
pub mod pipeline;
pub mod posepatch;
pub mod recognizer;
pub mod streams;
pub mod synthwalk;
pub mod tensornet;

pub use error::{GaitError, Result};
