pub mod chain;
pub mod container;
pub mod error;
pub mod fiber;
pub mod frame;
pub mod metrics;
pub mod rnn;
pub mod rx;
pub mod signal;
pub mod tx;
pub mod volterra;

pub use error::{Error, Result};
