//! Co-clustering of three-way time-dependent data.
//!
//! Rows (subjects) and columns (variables) of a grid of curves are
//! partitioned simultaneously. Each block's curves follow a shape invariant
//! model whose amplitude, scale and phase random effects can be switched on
//! or off, and the model is fitted by a marginalized SEM-Gibbs algorithm.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod grid;
pub mod kmeans;
pub mod lbm;
pub mod metrics;
pub mod msem;
pub mod nlme_fit;
pub mod preprocess;
pub mod rng;
pub mod selection;
pub mod sim_model;
pub mod splines;

pub use error::{Error, Result};
