//! SO(3)/SE(3) primitives, quaternion kinematics and velocity
//! trivializations.
//!
//! Conventions used throughout the crate:
//!
//! - 6-D velocities stack the linear part first: `V = [v; w]`.
//! - Quaternions are scalar-first `(r0, r1, r2, r3)` with the canonical sign
//!   `r0 >= 0`, and follow the Hamilton product. The associated rotation maps
//!   body coordinates to inertial coordinates, and the body (left-trivialized)
//!   angular velocity satisfies `w = 2 G(rho) rho_dot`.

use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector4, Vector6};
use thiserror::Error;

/// Validation tolerance for rotation orthogonality and determinant.
pub const ROTATION_TOL: f64 = 1e-10;
/// Validation tolerance for quaternion unit norm and axis norms.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation: orthogonality/determinant defect {defect:.3e}")]
    NotARotation { defect: f64 },
    #[error("axis must have unit norm, got {norm}")]
    NonUnitAxis { norm: f64 },
    #[error("quaternion must have unit norm, got {norm}")]
    NonUnitQuaternion { norm: f64 },
    #[error("matrix is not skew-symmetric: symmetric part {defect:.3e} exceeds tolerance")]
    NotSkewSymmetric { defect: f64 },
}

/// Returns the skew-symmetric matrix `v^` such that `v^ w = v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]. Rejects matrices whose symmetric part exceeds 1e-9.
pub fn unskew(m: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let sym = 0.5 * (m + m.transpose());
    let defect = sym.norm();
    if defect > UNIT_TOL {
        return Err(GeometryError::NotSkewSymmetric { defect });
    }
    Ok(Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// A rotation matrix in SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation { matrix: Matrix3::identity() }
    }

    /// Wraps a matrix, checking orthogonality and `det = +1` within 1e-10.
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ortho = (matrix.transpose() * matrix - Matrix3::identity()).norm();
        let det = (matrix.determinant() - 1.0).abs();
        let defect = ortho.max(det);
        if defect > ROTATION_TOL {
            return Err(GeometryError::NotARotation { defect });
        }
        Ok(Rotation { matrix })
    }

    /// Rodrigues formula `I + sin(t) a^ + (1 - cos(t)) (a^)^2`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self, GeometryError> {
        let norm = axis.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(GeometryError::NonUnitAxis { norm });
        }
        let ax = skew(axis);
        let matrix = Matrix3::identity() + angle.sin() * ax + (1.0 - angle.cos()) * (ax * ax);
        Ok(Rotation { matrix })
    }

    pub fn from_quaternion(q: &UnitQuaternion) -> Self {
        let (r0, rv) = (q.scalar(), q.vector());
        let rx = skew(&rv);
        Rotation { matrix: Matrix3::identity() + 2.0 * r0 * rx + 2.0 * (rx * rx) }
    }

    /// Scalar-first quaternion with canonical sign `r0 >= 0` (Shepperd's method).
    pub fn to_quaternion(&self) -> UnitQuaternion {
        let m = &self.matrix;
        let trace = m.trace();
        // Pick the largest of (1+trace, 1+2*m_ii-trace) for numerical safety.
        let mut q = Vector4::zeros();
        let t0 = 1.0 + trace;
        let tx = 1.0 + 2.0 * m[(0, 0)] - trace;
        let ty = 1.0 + 2.0 * m[(1, 1)] - trace;
        let tz = 1.0 + 2.0 * m[(2, 2)] - trace;
        if t0 >= tx.max(ty).max(tz) {
            let r = t0.sqrt();
            q[0] = 0.5 * r;
            q[1] = 0.5 * (m[(2, 1)] - m[(1, 2)]) / r;
            q[2] = 0.5 * (m[(0, 2)] - m[(2, 0)]) / r;
            q[3] = 0.5 * (m[(1, 0)] - m[(0, 1)]) / r;
        } else if tx >= ty.max(tz) {
            let r = tx.sqrt();
            q[0] = 0.5 * (m[(2, 1)] - m[(1, 2)]) / r;
            q[1] = 0.5 * r;
            q[2] = 0.5 * (m[(1, 0)] + m[(0, 1)]) / r;
            q[3] = 0.5 * (m[(0, 2)] + m[(2, 0)]) / r;
        } else if ty >= tz {
            let r = ty.sqrt();
            q[0] = 0.5 * (m[(0, 2)] - m[(2, 0)]) / r;
            q[1] = 0.5 * (m[(1, 0)] + m[(0, 1)]) / r;
            q[2] = 0.5 * r;
            q[3] = 0.5 * (m[(2, 1)] + m[(1, 2)]) / r;
        } else {
            let r = tz.sqrt();
            q[0] = 0.5 * (m[(1, 0)] - m[(0, 1)]) / r;
            q[1] = 0.5 * (m[(0, 2)] + m[(2, 0)]) / r;
            q[2] = 0.5 * (m[(2, 1)] + m[(1, 2)]) / r;
            q[3] = 0.5 * r;
        }
        UnitQuaternion::new_normalized(q)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn transpose(&self) -> Rotation {
        Rotation { matrix: self.matrix.transpose() }
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation { matrix: self.matrix * other.matrix }
    }
}

/// An element of SE(3) stored as rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform { rotation: Rotation::identity(), translation }
    }

    /// Closed-form inverse `(R^T, -R^T o)`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { translation: -rt.apply(&self.translation), rotation: rt }
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }
}

/// Frame in which a 6-D rigid-body velocity is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trivialization {
    /// Body coordinates (the moving frame).
    Left,
    /// Inertial coordinates.
    Right,
    /// Frame with the body origin but inertial orientation.
    Mixed,
}

/// A 6-D rigid-body velocity tagged with its trivialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialVelocity {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
    pub trivialization: Trivialization,
}

impl SpatialVelocity {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>, trivialization: Trivialization) -> Self {
        SpatialVelocity { linear, angular, trivialization }
    }

    pub fn zero(trivialization: Trivialization) -> Self {
        SpatialVelocity { linear: Vector3::zeros(), angular: Vector3::zeros(), trivialization }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        v.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        v
    }

    pub fn from_vector(v: &Vector6<f64>, trivialization: Trivialization) -> Self {
        SpatialVelocity {
            linear: v.fixed_rows::<3>(0).into(),
            angular: v.fixed_rows::<3>(3).into(),
            trivialization,
        }
    }
}

/// 6x6 adjoint of `H`.
///
/// With `dual = false` this is the velocity transform `[[R, o^ R], [0, R]]`
/// taking a left-trivialized velocity to the frame on the other side of `H`.
/// With `dual = true` it is the wrench transform `[[R, 0], [o^ R, R]]`,
/// the transpose of the inverse velocity adjoint.
pub fn adjoint(h: &RigidTransform, dual: bool) -> Matrix6<f64> {
    let r = h.rotation.matrix();
    let ox_r = skew(&h.translation) * r;
    let mut x = Matrix6::zeros();
    if dual {
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        x.fixed_view_mut::<3, 3>(3, 0).copy_from(&ox_r);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    } else {
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        x.fixed_view_mut::<3, 3>(0, 3).copy_from(&ox_r);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    }
    x
}

/// Re-expresses `v` in the `target` trivialization. `h` is the pose of the
/// moving frame in the inertial frame (the transform whose derivative
/// defines the velocity).
pub fn convert_trivialization(
    v: &SpatialVelocity,
    h: &RigidTransform,
    target: Trivialization,
) -> SpatialVelocity {
    if v.trivialization == target {
        return *v;
    }
    let left = to_left(v, h);
    match target {
        Trivialization::Left => left,
        Trivialization::Right => {
            let out = adjoint(h, false) * left.to_vector();
            SpatialVelocity::from_vector(&out, Trivialization::Right)
        }
        Trivialization::Mixed => {
            let r = h.rotation.matrix();
            SpatialVelocity {
                linear: r * left.linear,
                angular: r * left.angular,
                trivialization: Trivialization::Mixed,
            }
        }
    }
}

fn to_left(v: &SpatialVelocity, h: &RigidTransform) -> SpatialVelocity {
    match v.trivialization {
        Trivialization::Left => *v,
        Trivialization::Right => {
            let inv = adjoint(&h.inverse(), false);
            SpatialVelocity::from_vector(&(inv * v.to_vector()), Trivialization::Left)
        }
        Trivialization::Mixed => {
            let rt = h.rotation.transpose();
            SpatialVelocity {
                linear: rt.apply(&v.linear),
                angular: rt.apply(&v.angular),
                trivialization: Trivialization::Left,
            }
        }
    }
}

/// A unit quaternion, scalar part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    coords: Vector4<f64>,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        UnitQuaternion { coords: Vector4::new(1.0, 0.0, 0.0, 0.0) }
    }

    /// Wraps a 4-vector, checking unit norm within 1e-9. The sign is fixed so
    /// that the scalar part is non-negative.
    pub fn from_coords(coords: Vector4<f64>) -> Result<Self, GeometryError> {
        let norm = coords.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(GeometryError::NonUnitQuaternion { norm });
        }
        Ok(Self::new_normalized(coords))
    }

    /// Normalizes and fixes the canonical sign.
    pub fn new_normalized(coords: Vector4<f64>) -> Self {
        let mut c = coords / coords.norm();
        if c[0] < 0.0 {
            c = -c;
        }
        UnitQuaternion { coords: c }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self, GeometryError> {
        let norm = axis.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(GeometryError::NonUnitAxis { norm });
        }
        let half = 0.5 * angle;
        let s = half.sin();
        Ok(Self::new_normalized(Vector4::new(half.cos(), s * axis.x, s * axis.y, s * axis.z)))
    }

    pub fn coords(&self) -> &Vector4<f64> {
        &self.coords
    }

    pub fn scalar(&self) -> f64 {
        self.coords[0]
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.coords[1], self.coords[2], self.coords[3])
    }

    pub fn to_rotation(&self) -> Rotation {
        Rotation::from_quaternion(self)
    }
}

/// Hamilton product of two (not necessarily unit) scalar-first quaternions.
pub fn quaternion_product(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (a0, av) = (a[0], Vector3::new(a[1], a[2], a[3]));
    let (b0, bv) = (b[0], Vector3::new(b[1], b[2], b[3]));
    let scalar = a0 * b0 - av.dot(&bv);
    let vector = a0 * bv + b0 * av + av.cross(&bv);
    Vector4::new(scalar, vector.x, vector.y, vector.z)
}

/// The 3x4 map `G(rho) = [-rho_v | rho_0 I - rho_v^]` relating the quaternion
/// derivative to the body angular velocity, `w = 2 G(rho) rho_dot`.
pub fn quaternion_g_map(rho: &UnitQuaternion) -> SMatrix<f64, 3, 4> {
    g_map_raw(rho.coords())
}

/// [`quaternion_g_map`] without the unit-norm requirement; used where the
/// quaternion is an optimization variable only approximately on the sphere.
pub fn g_map_raw(c: &Vector4<f64>) -> SMatrix<f64, 3, 4> {
    SMatrix::<f64, 3, 4>::from_row_slice(&[
        -c[1], c[0], c[3], -c[2],
        -c[2], -c[3], c[0], c[1],
        -c[3], c[2], -c[1], c[0],
    ])
}

/// Body angular velocity from a quaternion and its derivative.
pub fn angular_velocity_from_quaternion_rate(
    rho: &UnitQuaternion,
    rho_dot: &Vector4<f64>,
) -> Vector3<f64> {
    2.0 * quaternion_g_map(rho) * rho_dot
}

/// Quaternion derivative from a body angular velocity,
/// `rho_dot = 1/2 rho (x) (0, w)`.
pub fn quaternion_rate_from_angular_velocity(
    rho: &UnitQuaternion,
    omega: &Vector3<f64>,
) -> Vector4<f64> {
    0.5 * quaternion_product(rho.coords(), &Vector4::new(0.0, omega.x, omega.y, omega.z))
}
