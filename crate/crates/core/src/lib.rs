//! Gaussian-process control barrier functions: learn a safety function from
//! samples, differentiate it in closed form (also under Gaussian state
//! uncertainty), and rectify nominal inputs with a minimum-norm QP.

pub mod barrier;
pub mod cli;
pub mod config;
pub mod error;
pub mod filter;
pub mod gp;
pub mod kernel;
pub mod oracle;
pub mod sim;

pub use error::{Error, Result};
