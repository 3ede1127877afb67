//! Trajectory optimization and predictive control toolkit for legged
//! locomotion, verifiable at desk scale on reduced robot models.
//!
//! The crate is organized in layers:
//!
//! - [`geometry`]: SO(3)/SE(3) primitives, quaternion kinematics, adjoints
//!   and velocity-trivialization conversions.
//! - [`kinematics`]: tree-structured multibody forward kinematics, geometric
//!   Jacobians, center of mass and the Centroidal Momentum Matrix.
//! - [`integrators`]: single-step Runge-Kutta integration (explicit and
//!   implicit) driven by Butcher tableaux.
//! - [`solvers`]: KKT residuals, dense active-set QP, log-barrier Newton NLP
//!   and Riccati-based LQR.
//! - [`ocp`]: continuous optimal-control problems, multiple-shooting
//!   transcription and the receding-horizon loop.
//! - [`simplified`]: LIP, Capture Point, ZMP cart-table, variable-height
//!   double pendulum and the step-recovery affine momentum model.
//! - [`contact`]: contact feasibility, the three complementarity
//!   parametrizations, corner-force decomposition and friction-cone rays.
//! - [`locomotion`]: unicycle footstep planning, constrained ZMP MPC,
//!   push-recovery MPC and the phase-based step-up planner.
//! - [`wholebody`]: the contact-implicit whole-body DAE, walking tasks and
//!   constraints, OCP assembly and the complementarity-accuracy benchmark.

pub mod contact;
pub mod geometry;
pub mod integrators;
pub mod kinematics;
pub mod locomotion;
pub mod ocp;
pub mod simplified;
pub mod solvers;
pub mod wholebody;
