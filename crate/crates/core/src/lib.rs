//! Coreset selection against a validation pool by minimizing an optimal-transport
//! proxy objective: the OT distance between the selected subset and the
//! validation set under a cost matrix that folds a per-sample gradient-norm
//! bonus into the embedding distances.
//!
//! The pipeline runs in two stages:
//!
//! 1. [`greedy`] relaxes the transport constraints into a p-median problem and
//!    builds an initial subset greedily.
//! 2. [`refine`] estimates per-sample marginal improvements from the optimal
//!    dual variables, prunes to the most promising swap candidates, and
//!    verifies each swap with an exact transport solve.
//!
//! [`selector`] wires the stages together (plus a per-class variant for
//! labeled data), [`ot`] holds the exact transportation solver, and
//! [`oracle`] provides brute-force and analytic ground truth used by tests.

pub mod cost;
pub mod error;
pub mod greedy;
pub mod oracle;
pub mod ot;
pub mod pool;
pub mod refine;
pub mod report;
pub mod selector;

pub use cost::{CostRows, DistanceMatrix, LazyPooMatrix, Metric, PooCostMatrix};
pub use error::{Error, Result};
pub use greedy::CoresetState;
pub use ot::{Marginals, TransportSolution};
pub use pool::{Pool, PoolRole};
pub use report::SelectionReport;
pub use selector::SelectionConfig;
