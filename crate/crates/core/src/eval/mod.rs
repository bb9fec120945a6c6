//! Posterior and score quality metrics, the ABC baseline and the Gibbs
//! reference for the regression benchmark.

mod abc;
mod fisher;
mod gibbs;
mod metrics;
mod predictive;

pub use abc::*;
pub use fisher::*;
pub use gibbs::*;
pub use metrics::*;
pub use predictive::*;
