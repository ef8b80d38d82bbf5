//! Training-free visual token pruning for vision-language decoders.
//!
//! The pipeline runs once between two decoder layers:
//!
//! 1. [`masking`] turns the pre-softmax alignment of the visual span into a
//!    per-token salience and relaxes the causal mask inside that span with a
//!    log-penalty, so early patches can see forward context.
//! 2. [`pruning`] keeps the top-k visual tokens under that attention, merges
//!    redundant survivors with salience-weighted convex combinations and
//!    refills the vacated slots from the pruned pool.
//!
//! [`cost_model`] gives the analytic FLOPs and KV-cache footprint of a
//! pruning schedule, and [`harness`] is a small seeded decoder that runs the
//! whole thing end to end with a real KV cache.

pub mod cost_model;
pub mod error;
pub mod harness;
pub mod io;
pub mod masking;
pub mod numerics;
pub mod pruning;
pub mod trace;

pub use error::{Error, Result};
pub use masking::{MaskConfig, SalienceProfile, SequenceLayout};
pub use numerics::{Matrix, RopeParams, MASKED};
pub use pruning::{PruneConfig, PruneResult, SelectionMode};
