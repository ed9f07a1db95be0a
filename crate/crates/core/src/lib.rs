pub mod adapt;
pub mod benchmark;
pub mod body;
mod error;
pub mod hmr;
pub mod md;
pub mod metrics;
pub mod optim;
pub mod paramfile;
pub mod pretrain;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
