//! Runtime manager for containerized simulation systems.

pub mod canonical;
pub mod compute;
pub mod experiment;
pub mod store;
pub mod sysdef;
pub mod config;
pub mod manager;
pub mod evalapi;
pub mod client;
pub mod bench;
pub mod cli;
