//! FRAME (Filters, Random field, And Maximum Entropy) image models over
//! convolutional filter banks.
//!
//! The crate covers image I/O, filter banks and their gradients, the FRAME
//! energy models, Langevin sampling, maximum-likelihood learning (including a
//! generative convolutional layer), statistics-matching synthesis and an
//! exact enumeration oracle for tiny discrete domains.

pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod fsutil;
pub mod image;
pub mod julesz;
pub mod learner;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
