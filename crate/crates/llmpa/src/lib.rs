//! Std side of the agent: fixture formats, scripted and HTTP backends,
//! parallel suite running, reports and the command line.

pub mod cli;
pub mod config;
pub mod formats;
pub mod http;
pub mod report;
pub mod runner;
pub mod script;

pub use llmpa_core as core;
