//! Dataset-specific profiling toolkit.
//!
//! Three pillars, one crate:
//!
//! * [`rankvec`] — ranking vectors over model metrics and the Euclidean /
//!   Kendall tau distances between them, with category-level averages.
//! * [`reaction`] + [`swarm`] — mass-action ODE reaction networks, cell
//!   populations drawn from multivariate lognormals, and particle swarm
//!   estimation of rate constants by moment matching.
//! * [`weightstats`] + [`boost`] + [`tinynet`] + [`harness`] — per-epoch
//!   weight summary statistics mapped to final test accuracy with
//!   gradient-boosted regression trees, exercised end to end by a small
//!   MLP trainer and an epoch-cap sweep.
//!
//! The `profilebench` binary exposes each stage as a subcommand; see the
//! repository README for file formats.

pub mod boost;
pub mod error;
pub mod fsio;
pub mod harness;
pub mod rankvec;
pub mod reaction;
pub mod seeds;
pub mod swarm;
pub mod tinynet;
pub mod weightstats;

pub use error::{Error, ErrorCategory, Result};
