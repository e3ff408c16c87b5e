//! Class-specific prompts and continual adapters on a small vision
//! transformer, trained stage by stage without replaying old data.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod p2l;
mod params;
pub mod report;
pub mod stream;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
