//! Offline decentralized multi-agent Q-learning on tabular MDPs, with value
//! deviation and transition normalization of each agent's empirical kernel.

// Negated comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod empirical;
pub mod env;
pub mod error;
pub mod mdp_text;
pub mod learner;
pub mod qtable;
pub mod tables;
pub mod transforms;

pub mod verify;

pub use error::{Error, Result};
