//! Engine for cluster-driven mass annotation of feature vectors.
//!
//! The pipeline is: load feature vectors ([`features`]), extract dense seeds
//! from the unassigned pool ([`density`]), validate and grow seeds with a
//! page-wise boundary search ([`lifecycle`]), arrange the grown clusters into
//! a nameable tree ([`hierarchy`]) and measure the outcome ([`metrics`]).
//! Every annotator action is recorded as an [`events::AnnotationEvent`].

pub mod density;
pub mod error;
pub mod events;
pub mod features;
pub mod hierarchy;
pub mod lifecycle;
pub mod metrics;
pub mod numeric;

pub use error::{Error, Result};
pub use features::{FeatureStore, ObjectRecord};
