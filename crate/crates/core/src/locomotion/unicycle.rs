//! Unicycle kinematics and the feedback law driving a control point toward a
//! moving reference.

use super::LocomotionError;
use nalgebra::{Matrix2, Vector2};

/// Planar unicycle with a body-fixed control point offset `d` and wheel
/// half-track `m_u`.
#[derive(Debug, Clone, Copy)]
pub struct UnicycleState {
    pub position: Vector2<f64>,
    pub heading: f64,
    /// Control point offset in body coordinates; `d[0] != 0` is required by
    /// the feedback law.
    pub control_offset: Vector2<f64>,
    /// Wheel distance from the body center.
    pub half_track: f64,
}

pub fn rotation2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

impl UnicycleState {
    /// World position of the control point `x_f = x_u + R(theta) d`.
    pub fn control_point(&self) -> Vector2<f64> {
        self.position + rotation2(self.heading) * self.control_offset
    }

    /// World positions of the left and right wheels.
    pub fn wheel_positions(&self) -> (Vector2<f64>, Vector2<f64>) {
        let r = rotation2(self.heading);
        (
            self.position + r * Vector2::new(0.0, self.half_track),
            self.position + r * Vector2::new(0.0, -self.half_track),
        )
    }

    /// Integrates the unicycle one step under rolling speed `v` and turn
    /// rate `omega` (forward Euler on the heading, exact on the arc).
    pub fn advance(&self, v: f64, omega: f64, dt: f64) -> UnicycleState {
        let heading = self.heading + omega * dt;
        // Midpoint heading keeps the arc integration second order.
        let mid = self.heading + 0.5 * omega * dt;
        let direction = Vector2::new(mid.cos(), mid.sin());
        UnicycleState { position: self.position + v * dt * direction, heading, ..*self }
    }
}

/// Feedback `c = B(theta)^-1 (x_f_dot* - K (x_f - x_f*))` placing the error
/// dynamics at `-K`. Fails when the control point sits on the wheel axis.
pub fn unicycle_control(
    state: &UnicycleState,
    target: &Vector2<f64>,
    target_rate: &Vector2<f64>,
    gain: &Matrix2<f64>,
) -> Result<(f64, f64), LocomotionError> {
    let d = state.control_offset;
    if d.x.abs() < 1e-12 {
        return Err(LocomotionError::SingularControlPoint);
    }
    let error = state.control_point() - target;
    let desired = target_rate - gain * error;
    // B = R(theta) [[1, -d2], [0, d1]]; invert the triangular factor first.
    let body = rotation2(state.heading).transpose() * desired;
    let omega = body.y / d.x;
    let v = body.x + d.y * omega;
    Ok((v, omega))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn at_reference_with_zero_feedforward_stops() {
        let state = UnicycleState {
            position: Vector2::new(1.0, 2.0),
            heading: 0.7,
            control_offset: Vector2::new(0.1, 0.0),
            half_track: 0.07,
        };
        let target = state.control_point();
        let (v, omega) =
            unicycle_control(&state, &target, &Vector2::zeros(), &Matrix2::identity()).unwrap();
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
        assert_relative_eq!(omega, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_inverted_gain_matrix() {
        // theta = 0, d = (0.1, 0), K = I: B = [[1, 0], [0, 0.1]], so an error
        // (e_x, e_y) maps to v = -e_x, omega = -10 e_y.
        let state = UnicycleState {
            position: Vector2::zeros(),
            heading: 0.0,
            control_offset: Vector2::new(0.1, 0.0),
            half_track: 0.07,
        };
        let (ex, ey) = (0.3, -0.2);
        let target = state.control_point() - Vector2::new(ex, ey);
        let (v, omega) =
            unicycle_control(&state, &target, &Vector2::zeros(), &Matrix2::identity()).unwrap();
        assert_relative_eq!(v, -ex, epsilon = 1e-12);
        assert_relative_eq!(omega, -10.0 * ey, epsilon = 1e-12);
    }

    #[test]
    fn wheel_axis_control_point_is_singular() {
        let state = UnicycleState {
            position: Vector2::zeros(),
            heading: 0.0,
            control_offset: Vector2::new(0.0, 0.1),
            half_track: 0.07,
        };
        assert!(matches!(
            unicycle_control(&state, &Vector2::zeros(), &Vector2::zeros(), &Matrix2::identity()),
            Err(LocomotionError::SingularControlPoint)
        ));
    }

    #[test]
    fn closed_loop_error_contracts() {
        let mut state = UnicycleState {
            position: Vector2::zeros(),
            heading: 0.3,
            control_offset: Vector2::new(0.1, 0.0),
            half_track: 0.07,
        };
        let target = Vector2::new(0.5, -0.4);
        let gain = Matrix2::identity() * 2.0;
        let dt = 0.01;
        let initial_error = (state.control_point() - target).norm();
        for _ in 0..400 {
            let (v, omega) = unicycle_control(&state, &target, &Vector2::zeros(), &gain).unwrap();
            state = state.advance(v, omega, dt);
        }
        let final_error = (state.control_point() - target).norm();
        assert!(final_error < 1e-3 * initial_error, "error {final_error}");
    }
}
