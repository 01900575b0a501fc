//! Experiment drivers: synthetic data, prediction, and hyperparameter grids.

pub mod data;
pub mod gmrf;
pub mod gpc;
pub mod grid;
pub mod predict;
pub mod synth;
