//! Pedestrian agent models and semantic trajectory segmentation.
//!
//! The pipeline has two stages. A mixture of dynamic agents (linear dynamics
//! plus Gaussian start/goal beliefs) is fitted to whole trajectories with EM
//! ([`em`]); the smoothed states then feed a windowed hidden Markov model over
//! agent labels that splits each trajectory where its agent changes ([`hmm`]).
//! [`rdp`] provides the shape-based baseline, [`metrics`] the positional and
//! step errors with a cross-validation harness, and [`analytics`] the
//! transition, occurrence and density summaries.

extern crate self as agentseg;

pub mod analytics;
pub mod em;
pub mod error;
pub mod hmm;
pub mod io;
pub mod lds;
pub mod linalg;
pub mod metrics;
pub mod rdp;
pub mod synth;
pub mod types;

#[cfg(test)]
pub(crate) mod oracles;

pub use error::{Error, Result};
pub use types::{
    AgentModel, BeliefParams, DynamicsParams, HiddenTuple, MixtureModel, Segmentation, Trajectory,
};
