//! Project persistence, event-sourced state and the HTTP API.
//!
//! A [`Project`] is the fold of its annotation event log. A
//! [`StoredProject`] binds one to a directory, a [`Workspace`] manages a
//! directory of projects and [`api::router`] exposes them over HTTP.

pub mod api;
pub mod error;
pub mod persist;
pub mod project;
pub mod workspace;

pub use error::{ServiceError, ServiceResult};
pub use persist::{load_store, StoredProject};
pub use project::{Clock, CommitResult, IterationOutcome, IterationPlan, ManualClock, Project, ProjectConfig, SystemClock};
pub use workspace::{ProjectHandle, Workspace};
