//! Score-network estimation from reference tables.

mod boundary;
mod losses;
mod tables;
mod train;

pub use boundary::*;
pub use losses::*;
pub use tables::*;
pub use train::*;
