//! MP-EM: compressive sampling reconstruction with hidden Markov tree priors.
//!
//! The signal prior lives in [`hmt`], measurement operators in [`sensing`],
//! the exact tree M step in [`max_product`] and the EM loop with variance
//! grid search in [`em`]. [`experiments`] holds the Monte Carlo harness and
//! [`cli`] the `mpem` command line.

pub mod cli;
pub mod em;
pub mod error;
pub mod experiments;
pub mod hmt;
pub mod max_product;
pub mod rng;
pub mod sensing;

pub use error::{MpemError, Result};
pub use hmt::{HmtParams, StateEstimate, TreeStructure};
