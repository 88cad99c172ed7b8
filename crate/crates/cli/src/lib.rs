//! Driver for region-controlled DiT runs: generation, depth ablation, mask
//! dumps and progressive prompts. See `config` for the TOML grammar.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

pub use cli::{run, Cli};
pub use error::CliError;
