//! Robust incremental distributed collaborative SLAM back-end.
//!
//! Each robot runs an [`AgentState`]: an incremental robust solver over its
//! local factor graph, coupled to neighbors through consensus biased priors
//! that are refreshed by pairwise exchanges.

pub mod agent;
pub mod consensus;
pub mod data;
pub mod eval;
pub mod factors;
pub mod harness;
pub mod manifold;
pub mod netsim;
pub mod solver;

pub use agent::{AgentConfig, AgentError, AgentState, CommResult, CommSnapshot, KernelMode};
pub use consensus::{mesa_plus, ConstraintFunction, LocalProblem, MesaPlusConfig};
pub use data::{generate, Dataset, ScenarioConfig};
pub use eval::{MetricReport, SolutionHistory};
pub use factors::{Factor, NoiseModel, RobotId, RobustKernel, Value, Values, VariableKey};
pub use harness::{run, MethodKind, MethodSpec, RunConfig, RunOutput};
pub use manifold::{Pose, Rotation};
pub use netsim::{NetSim, NetworkConfig, Outcome};
pub use solver::{optimize_batch, optimize_gnc, FactorGraph, IncrementalSolver, SolverConfig};
