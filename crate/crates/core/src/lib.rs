//! Geodesic beam toolkit.
//!
//! Model manifolds, the geodesic flow and its linearization, tube covers of
//! unit conormal bundles, non-self-looping partitions, and the averaged
//! eigenfunction bounds they feed, together with exactly computable
//! eigenfunctions for comparison.

pub mod bound;
pub mod conormal;
pub mod cover;
pub mod eigenlab;
pub mod error;
pub mod flow;
pub mod harness;
pub mod manifold;
pub mod quad;

pub use error::{GeoError, Result};
pub use flow::{DiscreteHyperbolicSystem, FlowSegment, PhasePoint, SplittingEstimate};
pub use manifold::{CurvatureKind, ManifoldModel, WarpProfile};
