//! Deterministic simulator for personalized federated learning with global
//! feature alignment and bias-variance optimal classifier combination, plus
//! exact checks of the linear-model analysis on finite sample spaces.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod orchestrator;
pub mod qpsolve;
pub mod server;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
