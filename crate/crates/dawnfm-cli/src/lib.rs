//! Library face of the `dawnfm` command-line tool: experiment
//! configuration and the train / infer / eval / toy / op-test
//! pipelines, shared between the binary and the acceptance suite.

pub mod config;
pub mod pipeline;
