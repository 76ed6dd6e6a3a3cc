//! HTTP service and command-line operations over a trained pipeline.

pub mod api;
pub mod commands;
pub mod config;
pub mod error;
pub mod state;
