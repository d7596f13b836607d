//! Command-line front end: configuration, data files, benchmark runners,
//! reports and plots.

pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod plot;
pub mod report;
pub mod workload;
