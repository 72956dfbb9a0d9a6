//! Server side of the annotation platform: the data directory, PDF import,
//! the export bundle, configuration and the network runtime. The `care`
//! binary exposes all of it as subcommands.

pub mod config;
pub mod csv_out;
pub mod export;
pub mod pdf;
pub mod server;
pub mod store;
