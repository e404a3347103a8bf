//! Simulation, optimization and learning for RIS-assisted digital-twin
//! interaction.

pub mod beamforming;
pub mod channel;
pub mod config;
pub mod error;
pub mod env;
pub mod qoe;
pub mod training;
pub mod transformer;
