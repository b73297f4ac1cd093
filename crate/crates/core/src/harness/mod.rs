//! Configuration, training, checkpoints and experiment commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod train;
