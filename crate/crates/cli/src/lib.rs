//! Batch front end over the solver and simulator: experiment configuration,
//! the built-in reference rows, and CSV/JSON emission.

pub mod config;
pub mod output;
pub mod presets;
pub mod runner;
