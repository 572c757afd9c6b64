//! Zero dynamics attack (ZDA) analysis for networked linear systems.
//!
//! The crate covers the whole pipeline: continuous-time network models,
//! asynchronous zero-order-hold discretization into horizon-stacked
//! operators, the four transient security metrics, attack synthesis and
//! stealthiness checks, causal output feedback, a dense SDP solver, the
//! lifted topology-switching problem and a discrete-time simulator with a
//! residual detector.

pub mod discretize;
pub mod error;
pub mod feedback;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod sdp;
pub mod sim;
pub mod switching;
pub mod zda;

pub use error::{Error, Result};
