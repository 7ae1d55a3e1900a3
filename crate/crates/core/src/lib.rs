//! Deep-learning discretization of parabolic PDEs: each backward-Euler step
//! is solved by training a wide one-layer bump network on an energy
//! functional, with tools to compare finite-width training against its
//! infinite-width kernel limit.

pub mod activation;
pub mod checkpoint;
pub mod config;
pub mod energy;
pub mod error;
pub mod field;
pub mod harness;
pub mod operators;
pub mod quadrature;
pub mod reference;
pub mod seeds;
pub mod shallow_net;
pub mod training;
pub mod widelimit;

pub use activation::BumpActivation;
pub use error::{Error, Result};
pub use field::{BumpSum, BumpTerm, Field, FnField, ZeroField};
pub use quadrature::{BoxDomain, InnerProduct, NodeCoefficients, NodeField, QuadratureRule, RuleKind};
pub use shallow_net::{clip, init_params, validate_init, MomentReport, NetworkParams, NeuronParams, ParamGradient};
pub use operators::{AssumptionConstants, JumpLaw, JumpSamples, OperatorKind, OperatorSpec};
pub use energy::EnergyContext;
pub use training::{solve_pde, train, FlowConfig, NetworkConfig, TimeStepConfig};
pub use reference::{bs_reference, error_report, heat_convolution, ErrorTable, ExactKind, ExactSolution};
pub use config::{load_config, Resolved, RunConfig};
pub use harness::{run, RunManifest, Subcommand};
