pub mod analyze;
pub mod checkpoint;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod optim;
pub mod tasks;
pub mod textcodec;
pub mod trainer;

pub use error::{Error, Result};
