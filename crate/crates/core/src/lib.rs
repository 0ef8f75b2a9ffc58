pub mod data;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod math;
pub mod meta;
pub mod models;
pub mod optim;
pub mod runner;
pub mod synth;

pub use error::{Error, Result};
