pub mod flexdiff;
pub mod nn;
pub mod env;
pub mod cgrpa;
pub mod config;
pub mod harness;
pub mod cli;
