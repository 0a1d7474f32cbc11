pub mod actstore;
pub mod adapter;
pub mod cli;
pub mod digest;
pub mod error;
pub mod expharness;
pub mod lens;
pub mod metrics;
pub mod optim;
pub mod probekit;
pub mod report;
pub mod synthgen;
pub mod toymodel;

pub use error::{Error, Result};
