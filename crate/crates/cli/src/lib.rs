//! Configuration, file formats and experiment drivers behind the `cedm`
//! command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod selfcheck;
