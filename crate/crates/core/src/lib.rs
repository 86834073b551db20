pub mod bncal;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretext;
pub mod runner;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
