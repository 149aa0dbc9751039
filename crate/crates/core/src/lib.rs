pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod head;
pub mod memory;
pub mod mission;
pub mod protocol;
pub mod robot;
pub mod station;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
