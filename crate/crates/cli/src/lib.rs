//! Command-line runner for the pentrail pipeline and the local operator
//! service the console talks to.

pub mod app;
pub mod config;
pub mod service;
