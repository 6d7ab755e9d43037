//! Consensus complementarity control (C3) for multi-contact systems.

pub mod benchmarks;
pub mod c3;
pub mod config;
pub mod contact;
pub mod document;
pub mod error;
pub mod lcp;
pub mod lcs;
pub mod miqp;
pub mod mpc;
pub mod qp;

pub use error::{Error, Result};
