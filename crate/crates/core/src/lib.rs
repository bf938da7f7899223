//! Multi-indication Bayesian meta-analysis of trial-level log hazard ratios.
//!
//! Univariate random-effects synthesis of a single endpoint, and bivariate
//! surrogacy synthesis of PFS and OS effects, each combined with one of five
//! between-indication sharing structures (see [`SharingStructure`]). Models
//! are fitted by a multi-chain Metropolis-within-Gibbs sampler
//! ([`sampler::run`]) and assessed with R-hat, ESS and DIC
//! ([`diagnostics`]).

pub mod config;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod evidence;
pub mod gaussian;
pub mod likelihood;
pub mod model;
pub mod prediction;
pub mod sampler;
pub mod synthetic;

pub use error::{Error, Result};
pub use evidence::{parse_evidence, EvidenceSet, TrialRecord};
pub use model::{
    build_layout, default_priors, EndpointMode, Model, ModelSpec, ParameterLayout, ParameterValues, PriorSettings,
    SharingStructure,
};
pub use sampler::{run, run_model, PosteriorDraws, RunOptions, SamplerConfig, StudyColumns};
