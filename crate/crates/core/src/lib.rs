//! Core of an LLM-driven app automation agent.
//!
//! Everything here needs only `alloc`: the UI tree model, section grouping,
//! prompts, calibration, the page-level world simulator and the metrics.
//! File formats, HTTP and the command line live in the `llmpa` crate.
#![no_std]

extern crate alloc;

pub mod backend;
pub mod calibration;
pub mod chain;
pub mod episode;
pub mod history;
pub mod layout;
pub mod metrics;
pub mod prediction;
pub mod text;
pub mod ui;
pub mod world;
