//! Command-line front end: run configuration, fitting pipeline, artifacts and demos.

pub mod commands;
pub mod config;
pub mod demo;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod svg;
