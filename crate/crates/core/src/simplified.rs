//! Closed-form and linear reduced models: linear inverted pendulum, Capture
//! Point, the ZMP cart-table system, the variable-height double pendulum and
//! the step-recovery affine momentum model.

use crate::geometry::{skew, RigidTransform};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("pendulum height must be positive, got {0}")]
    NonPositiveHeight(f64),
    #[error("contact multiplier must be non-negative, got {0}")]
    NegativeMultiplier(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// Pendulum constant `omega = sqrt(|g| / z_bar)`.
pub fn omega_from_height(z_bar: f64, gravity: f64) -> Result<f64, ModelError> {
    if z_bar <= 0.0 {
        return Err(ModelError::NonPositiveHeight(z_bar));
    }
    Ok((gravity.abs() / z_bar).sqrt())
}

/// Planar LIP state: CoM projection, its velocity and the pendulum constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipState {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
    pub omega: f64,
}

impl LipState {
    pub fn new(position: Vector2<f64>, velocity: Vector2<f64>, omega: f64) -> Self {
        LipState { position, velocity, omega }
    }
}

/// Exact LIP transition over time `t` with a fixed pivot `p`:
/// the cosh/sinh state-transition form of `x_ddot = omega^2 (x - p)`.
pub fn lip_flow(state: &LipState, pivot: &Vector2<f64>, t: f64) -> LipState {
    let w = state.omega;
    let (ch, sh) = ((w * t).cosh(), (w * t).sinh());
    let position = ch * state.position + (sh / w) * state.velocity + (1.0 - ch) * pivot;
    let velocity = (w * sh) * state.position + ch * state.velocity - (w * sh) * pivot;
    LipState { position, velocity, omega: w }
}

/// Capture Point `x_cp = x + x_dot / omega`.
pub fn capture_point(state: &LipState) -> Vector2<f64> {
    state.position + state.velocity / state.omega
}

/// Capture Point rate `omega (x_cp - p)`, the unstable LIP mode.
pub fn capture_point_rate(state: &LipState, pivot: &Vector2<f64>) -> Vector2<f64> {
    state.omega * (capture_point(state) - pivot)
}

/// Closed-form Capture Point evolution
/// `x_cp(t) = e^(omega t) (x_cp(0) - p) + p`.
pub fn capture_point_flow(cp0: &Vector2<f64>, pivot: &Vector2<f64>, omega: f64, t: f64) -> Vector2<f64> {
    (omega * t).exp() * (cp0 - pivot) + pivot
}

/// Output convention of the cart-table ZMP row `C = [I, 0, -gain I]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZmpOutputGain {
    /// `gain = 1 / omega^2 = z_bar / |g|`, the dimensionally consistent form.
    Consistent,
    /// `gain = omega^2`, the literal printed coefficient.
    Literal,
}

/// Triple-integrator cart-table system with ZMP output
/// `y = x - gain * x_ddot` per planar axis.
#[derive(Debug, Clone)]
pub struct CartTableSystem {
    pub a: SMatrix<f64, 6, 6>,
    pub b: SMatrix<f64, 6, 2>,
    pub c: SMatrix<f64, 2, 6>,
    pub omega: f64,
    pub output_gain: f64,
}

pub fn cart_table_system(omega: f64, gain: ZmpOutputGain) -> Result<CartTableSystem, ModelError> {
    if omega <= 0.0 {
        return Err(ModelError::NonPositiveHeight(omega));
    }
    let mut a = SMatrix::<f64, 6, 6>::zeros();
    a.fixed_view_mut::<2, 2>(0, 2).copy_from(&Matrix2::identity());
    a.fixed_view_mut::<2, 2>(2, 4).copy_from(&Matrix2::identity());
    let mut b = SMatrix::<f64, 6, 2>::zeros();
    b.fixed_view_mut::<2, 2>(4, 0).copy_from(&Matrix2::identity());
    let output_gain = match gain {
        ZmpOutputGain::Consistent => 1.0 / (omega * omega),
        ZmpOutputGain::Literal => omega * omega,
    };
    let mut c = SMatrix::<f64, 2, 6>::zeros();
    c.fixed_view_mut::<2, 2>(0, 0).copy_from(&Matrix2::identity());
    c.fixed_view_mut::<2, 2>(0, 4).copy_from(&(-output_gain * Matrix2::identity()));
    Ok(CartTableSystem { a, b, c, omega, output_gain })
}

impl CartTableSystem {
    pub fn zmp(&self, state: &SVector<f64, 6>) -> Vector2<f64> {
        self.c * state
    }

    pub fn a_dyn(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(6, 6, self.a.iter().copied())
    }

    pub fn b_dyn(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(6, 2, self.b.iter().copied())
    }

    pub fn c_dyn(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(2, 6, self.c.iter().copied())
    }
}

/// Per-foot input of the variable-height double pendulum: foot pose, CoP in
/// foot coordinates (z = 0 by construction) and the line-force multiplier.
#[derive(Debug, Clone)]
pub struct PendulumContactInput {
    pub pose: RigidTransform,
    pub cop_in_foot: Vector2<f64>,
    pub lambda: f64,
}

impl PendulumContactInput {
    /// World CoP `p + R cop`.
    pub fn world_cop(&self) -> Vector3<f64> {
        self.pose.apply_point(&Vector3::new(self.cop_in_foot.x, self.cop_in_foot.y, 0.0))
    }
}

/// CoM acceleration of the variable-height double pendulum,
/// `x_ddot = g + sum lambda_i (x - p_i - R_i cop_i)`.
pub fn double_pendulum_accel(
    com: &Vector3<f64>,
    inputs: &[PendulumContactInput],
    gravity: &Vector3<f64>,
) -> Result<Vector3<f64>, ModelError> {
    let mut acc = *gravity;
    for input in inputs {
        if input.lambda < 0.0 {
            return Err(ModelError::NegativeMultiplier(input.lambda));
        }
        acc += input.lambda * (com - input.world_cop());
    }
    Ok(acc)
}

/// Affine step-recovery model around a feedback linearization point.
///
/// State `chi = (x_com, x_com_dot, h_omega)`, input `f = (f_left, f_right)`
/// with each wrench stacked force-first, measured at the foot origin in a
/// frame oriented as the inertial one. The continuous model is
/// `chi_dot = E_t chi + F_t f + G_t + K0_t`; the discrete one is its forward
/// Euler with step `dt`.
#[derive(Debug, Clone)]
pub struct StepRecoveryModel {
    pub e_cont: SMatrix<f64, 9, 9>,
    pub f_cont: SMatrix<f64, 9, 12>,
    pub g_cont: SVector<f64, 9>,
    pub k0_cont: SVector<f64, 9>,
    pub e_discrete: SMatrix<f64, 9, 9>,
    pub f_discrete: SMatrix<f64, 9, 12>,
    pub g_discrete: SVector<f64, 9>,
    pub k0_discrete: SVector<f64, 9>,
    pub com_0: Vector3<f64>,
    pub force_0: [Vector6<f64>; 2],
    pub foot_positions: [Vector3<f64>; 2],
    pub mass: f64,
    pub dt: f64,
}

/// Assembles the Taylor-approximated momentum model.
///
/// `force_0` holds the linearization wrenches (force; torque) of the left and
/// right foot; `foot_positions` their application points.
pub fn step_recovery_model(
    com_0: &Vector3<f64>,
    force_0: &[Vector6<f64>; 2],
    foot_positions: &[Vector3<f64>; 2],
    mass: f64,
    gravity: &Vector3<f64>,
    dt: f64,
) -> Result<StepRecoveryModel, ModelError> {
    if dt <= 0.0 {
        return Err(ModelError::NonPositiveStep(dt));
    }
    let f_sum: Vector3<f64> = force_0[0].fixed_rows::<3>(0) + force_0[1].fixed_rows::<3>(0);
    let f_sum_skew = skew(&f_sum);

    let mut e = SMatrix::<f64, 9, 9>::zeros();
    e.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    e.fixed_view_mut::<3, 3>(6, 0).copy_from(&f_sum_skew);

    let mut f = SMatrix::<f64, 9, 12>::zeros();
    for (foot, position) in foot_positions.iter().enumerate() {
        let col = 6 * foot;
        f.fixed_view_mut::<3, 3>(3, col).copy_from(&(Matrix3::identity() / mass));
        f.fixed_view_mut::<3, 3>(6, col).copy_from(&skew(&(position - com_0)));
        f.fixed_view_mut::<3, 3>(6, col + 3).copy_from(&Matrix3::identity());
    }

    let mut g = SVector::<f64, 9>::zeros();
    g.fixed_rows_mut::<3>(3).copy_from(gravity);

    let mut k0 = SVector::<f64, 9>::zeros();
    k0.fixed_rows_mut::<3>(6).copy_from(&(-f_sum_skew * com_0));

    Ok(StepRecoveryModel {
        e_discrete: SMatrix::identity() + dt * e,
        f_discrete: dt * f,
        g_discrete: dt * g,
        k0_discrete: dt * k0,
        e_cont: e,
        f_cont: f,
        g_cont: g,
        k0_cont: k0,
        com_0: *com_0,
        force_0: *force_0,
        foot_positions: *foot_positions,
        mass,
        dt,
    })
}

impl StepRecoveryModel {
    /// Continuous-time rate `E chi + F f + G + K0`.
    pub fn rate(&self, chi: &SVector<f64, 9>, f: &SVector<f64, 12>) -> SVector<f64, 9> {
        self.e_cont * chi + self.f_cont * f + self.g_cont + self.k0_cont
    }

    /// One forward-Euler update of the discrete model.
    pub fn discrete_step(&self, chi: &SVector<f64, 9>, f: &SVector<f64, 12>) -> SVector<f64, 9> {
        self.e_discrete * chi + self.f_discrete * f + self.g_discrete + self.k0_discrete
    }

    /// Exact nonlinear momentum rate at a state and input, the quantity the
    /// affine model Taylor-approximates.
    pub fn exact_rate(
        &self,
        chi: &SVector<f64, 9>,
        f: &SVector<f64, 12>,
        gravity: &Vector3<f64>,
    ) -> SVector<f64, 9> {
        let com: Vector3<f64> = chi.fixed_rows::<3>(0).into();
        let vel: Vector3<f64> = chi.fixed_rows::<3>(3).into();
        let mut out = SVector::<f64, 9>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&vel);
        let mut lin = *gravity;
        let mut ang = Vector3::zeros();
        for foot in 0..2 {
            let force: Vector3<f64> = f.fixed_rows::<3>(6 * foot).into();
            let torque: Vector3<f64> = f.fixed_rows::<3>(6 * foot + 3).into();
            lin += force / self.mass;
            ang += (self.foot_positions[foot] - com).cross(&force) + torque;
        }
        out.fixed_rows_mut::<3>(3).copy_from(&lin);
        out.fixed_rows_mut::<3>(6).copy_from(&ang);
        out
    }

    pub fn e_discrete_dyn(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(9, 9, self.e_discrete.iter().copied())
    }

    pub fn f_discrete_dyn(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(9, 12, self.f_discrete.iter().copied())
    }

    pub fn affine_discrete_dyn(&self) -> DVector<f64> {
        DVector::from_iterator(9, (self.g_discrete + self.k0_discrete).iter().copied())
    }
}
