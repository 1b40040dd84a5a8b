mod error;
pub mod checkpoint;
pub mod config;
pub mod evalmetrics;
pub mod flow;
pub mod keygen;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
