//! Command-line front end of the collapse laboratory: experiment runs,
//! trajectory files and comparison plots.

pub mod commands;
pub mod plot;
pub mod trajectory;

pub use commands::{Cli, Command, ExitStatus};
