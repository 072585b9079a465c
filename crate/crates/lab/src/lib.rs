//! Experiments, file formats and the command-line driver built on
//! [`brwlab_core`].

pub mod cli;
pub mod fspec;
pub mod harness;
pub mod lawfile;
pub mod output;
pub mod runner;
