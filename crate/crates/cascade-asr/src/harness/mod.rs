//! End-to-end harness: the synthetic corpus, run configuration, and
//! the implementations behind the command-line interface.

pub mod config;
pub mod corpus;
pub mod runner;
