//! Forecast reconciliation treated as a general linear model.

pub mod cli;
pub mod error;
pub mod glm_core;
pub mod hierarchy;
pub mod matops;
pub mod reconcile;
pub mod scoring;
pub mod simlab;
pub mod uncertainty;

pub use error::{Error, Result};
