//! Command-line front end: configuration resolution (defaults → config file
//! → flags), the single-run commands, and the grid runners (`sweep`,
//! `ablate`).

pub mod commands;
pub mod config;
pub mod sweep;
