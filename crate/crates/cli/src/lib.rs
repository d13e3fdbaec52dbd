//! Command-line front end and HTTP service for specklenn.

pub mod api;
pub mod commands;
pub mod config;
pub mod preview;
