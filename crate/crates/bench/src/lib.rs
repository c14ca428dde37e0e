//! Desk-scale experiment harness: synthetic tasks, configs, runs, reports
//! and plots.

pub mod config;
pub mod plot;
pub mod report;
pub mod run;
pub mod tasks;
