//! One-vs-all binary classification on the unit hypersphere.
//!
//! The crate provides the loss family with closed-form gradients
//! ([`loss`]), the similarity adjustment map ([`simadjust`]), a sharded
//! classifier layer ([`shard`]), a small trainer ([`train`]), pair-wise
//! verification metrics and experiment drivers ([`eval`]), plus the
//! hypersphere primitives and synthetic data they share ([`sphere`], [`data`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod exact;
pub mod gradcheck;
pub mod loss;
pub mod par;
pub mod shard;
pub mod simadjust;
pub mod sphere;
pub mod train;

pub use error::{Error, Result};
