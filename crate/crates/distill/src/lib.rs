//! Host-side half of the distill prompt optimizer.
//!
//! [`distill_core`] holds the search loop and the metrics without touching
//! the operating system. This crate adds what a real run needs: chat
//! backends and a response cache ([`gateway`]), JSON-Lines datasets
//! ([`dataset`]), resumable run directories ([`run`]), report rendering
//! ([`report`]) and the command line ([`cli`]).

pub mod cli;
pub mod dataset;
pub mod gateway;
pub mod json;
pub mod report;
pub mod run;

pub use distill_core as core;
