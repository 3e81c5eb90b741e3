//! Statevector simulation, variational data assimilation and the hybrid
//! quantum–classical particle filter built on them.
//!
//! The common types are re-exported at the crate root; the modules hold the
//! full API.

pub mod dynamics;
pub mod encoding;
pub mod error;
pub mod fourdvar;
pub mod linalg;
pub mod linear_gaussian;
pub mod mcmc;
pub mod particle_filter;
pub mod pipeline;
pub mod qaoa;
pub mod rng;
pub mod statevector;

pub use dynamics::{generate_twin, Covariance, DynamicsModel, ObservationOperator, TwinConfig, TwinExperiment};
pub use encoding::EncodingScheme;
pub use error::{Error, Result};
pub use fourdvar::{AssimilationProblem, Observation};
pub use mcmc::{MassEstimate, ProposalKernel, QuantumMode, StepKind, TargetDistribution};
pub use particle_filter::{ParticleEnsemble, PfConfig, QvrConfig, Resampler};
pub use pipeline::{
    AssimilationReport, ComparisonTable, MethodConfig, PipelineConfig, ScalingConfig, ScalingKind, ScalingReport,
    VERSION,
};
pub use qaoa::{QaoaConfig, QaoaCost, QaoaParams};
pub use statevector::{DiagonalObservable, StateVector};
