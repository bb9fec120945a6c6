//! End-to-end runs: configuration, seeded stages persisted to a run
//! directory, and plot data.

mod config;
mod plot;
mod run;

pub use config::*;
pub use plot::*;
pub use run::*;
