//! Command-line tools and the HTTP review service.

pub mod api;
pub mod cli;
pub mod config;
pub mod jobs;
pub mod pipeline;
pub mod state_dir;
