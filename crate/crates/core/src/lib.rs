//! Eliciting pairwise correlations from a language model through triplet
//! comparison questions, and testing causal invariance on the result.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f64` or `f32`.

pub mod config;
pub mod estimate;
pub mod gateway;
pub mod glm;
pub mod icp;
pub mod linalg;
pub mod oracle;
pub mod prompt;
pub mod report;
pub mod scalar;
pub mod special;

pub use config::{DirectedPair, Environment, GridSpec, SamplingSpec, StudyConfig, Variable};
pub use estimate::{CorrelationEstimate, CorrelationMatrix, DirectedRatio, RhoEstimate};
pub use gateway::{AnswerSource, EndpointSpec, Gateway};
pub use glm::{fit_logistic, DecisionBoundary, GlmFit, TripletTally};
pub use icp::{run_icp, IcpProblem, IcpReport, SubsetResult};
pub use oracle::{OracleParams, OracleSource};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type GlmFit64 = GlmFit<f64>;
pub type GlmFit32 = GlmFit<f32>;
pub type Tally64 = TripletTally<f64>;
pub type Tally32 = TripletTally<f32>;
pub type DirectedRatio64 = DirectedRatio<f64>;
pub type DirectedRatio32 = DirectedRatio<f32>;
pub type RhoEstimate64 = RhoEstimate<f64>;
pub type RhoEstimate32 = RhoEstimate<f32>;
pub type IcpProblem64 = IcpProblem<f64>;
pub type IcpProblem32 = IcpProblem<f32>;
pub type IcpReport64 = IcpReport<f64>;
pub type IcpReport32 = IcpReport<f32>;
