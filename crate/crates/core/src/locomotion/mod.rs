//! Locomotion planners: unicycle footstep planning with merge points,
//! constrained ZMP MPC, push-recovery MPC with step trigger and swing
//! reference, and the phase-based step-up planner.

mod footsteps;
mod push_recovery;
mod step_up;
mod unicycle;
mod zmp_mpc;

pub use footsteps::{
    merge_plans, plan_footsteps, Foot, Footstep, FootstepParams, GaitPlan, InitialFeet,
    PhaseInterval, PhaseKind,
};
pub use push_recovery::{
    push_recovery_step, step_trigger, swing_reference, PushRecoveryController, PushRecoveryOutput,
    PushRecoveryParams, WrenchLimits,
};
pub use step_up::{plan_step_up, StepUpPhase, StepUpProblem, StepUpSolution, StepUpWeights};
pub use unicycle::{unicycle_control, UnicycleState};
pub use zmp_mpc::{
    convex_hull_2d, gait_support_polygon, gait_zmp_reference, polygon_from_hull, zmp_mpc_step,
    Polygon2, ZmpMpcParams,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LocomotionError {
    #[error("control point offset d1 = 0 makes the unicycle feedback singular")]
    SingularControlPoint,
    #[error("footstep planning failed: {0}")]
    Planning(String),
    #[error("invalid merge: {0}")]
    Merge(String),
    #[error("solver: {0}")]
    Solver(#[from] crate::solvers::SolverError),
    #[error("model: {0}")]
    Model(#[from] crate::simplified::ModelError),
    #[error("infeasible at node {node}: {detail}")]
    Infeasible { node: usize, detail: String },
    #[error("invalid problem: {0}")]
    Invalid(String),
}
