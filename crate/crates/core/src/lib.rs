pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod evaluator;
pub mod export;
pub mod mi_objectives;
pub mod network;
pub mod optim;
pub mod segmenter;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
