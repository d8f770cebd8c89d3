//! Library surface of the experiment runner (the `semcom` binary wires
//! these modules to the command line).

pub mod config;
pub mod csvio;
pub mod plot;
pub mod runner;
