//! HTTP API, command line and bot simulation around `townhall-core`.

pub mod api;
pub mod cli;
pub mod provider;
pub mod sim;
