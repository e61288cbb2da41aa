//! Synthetic data, training, tracking and diagnostics around the core tracker.

pub mod cli;
pub mod config;
pub mod crop;
pub mod error;
pub mod metrics;
pub mod paramfile;
pub mod pnm;
pub mod respmap;
pub mod synthetic;
pub mod tracker;
pub mod train;
pub mod triplet;
pub mod updatesim;
