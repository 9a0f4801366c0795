//! BEF-RLSVI: randomized value iteration for episodic MDPs whose transitions
//! and rewards are bilinear exponential families.

pub mod agent;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod estimation;
pub mod exploration;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod planner;
mod serde_util;

pub use agent::{Agent, AgentConfig, AgentState, Oracle, PlannerChoice, PolicyKind, RegretRecord};
pub use diagnostics::DiagnosticReport;
pub use envs::{EnvDef, Environment};
pub use error::{Error, Result};
pub use estimation::{ConfidenceConstants, GramAccumulator, History, MleConfig, Transition};
pub use exploration::NoiseConfig;
pub use harness::RunConfig;
pub use model::{
    BefModel, Family, ModelConstants, ModelDef, ParamVector, PhiMap, PsiMap, StateGrid, StateSpace,
};
pub use planner::{Backend, RffBasis, ValueTable};
