pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod fsutil;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod nncore;
pub mod preprocess;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
