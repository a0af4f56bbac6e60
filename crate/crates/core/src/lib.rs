pub mod cli;
pub mod config;
pub mod context_window;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pretrain_io;
pub mod search;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
