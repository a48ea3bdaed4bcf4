//! Generative modelling with Monge-Ampère flows.
//!
//! A scalar potential `φ` drives samples along `dx/dt = ∇φ(x)` while the
//! log-density follows `d ln p/dt = −∇²φ(x)`. The crate provides the
//! potential network, symmetrization over lattice groups, an RK4 integrator
//! with an exact reverse pass, the training objectives, and a small trainer.

mod binio;
pub mod data;
pub mod difftape;
pub mod error;
pub mod flow;
pub mod potential;
pub mod symmetry;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
pub use flow::{Direction, Field, FlowState, IntegratorConfig, ParamField};
pub use potential::PotentialParams;
pub use symmetry::{GroupElement, GroupKind, Symmetrized, SymmetryGroup, SymmetryMode};
pub use trainer::{Checkpoint, Objective, TrainConfig};
