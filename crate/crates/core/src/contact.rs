//! Contact-point force feasibility: the three complementarity
//! parametrizations, the planar-motion gate, wrench-to-corner-force
//! decomposition and friction-cone ray coordinates.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("contact rates required for the dynamic complementarity residual")]
    MissingRates,
    #[error("normal force must be positive for the corner decomposition, got {0}")]
    NonPositiveNormalForce(f64),
    #[error("center of pressure ({0}, {1}) outside the foot rectangle")]
    CopOutsideFoot(f64, f64),
    #[error("at least 3 rays required, got {0}")]
    TooFewRays(usize),
    #[error("non-negative least squares did not converge")]
    NnlsFailed,
}

/// Position/force pair of one contact point, with optional rates for the
/// dynamically enforced complementarity method.
#[derive(Debug, Clone)]
pub struct ContactPointState {
    pub position: Vector3<f64>,
    pub force: Vector3<f64>,
    pub position_rate: Option<Vector3<f64>>,
    pub force_rate: Option<Vector3<f64>>,
}

impl ContactPointState {
    pub fn new(position: Vector3<f64>, force: Vector3<f64>) -> Self {
        ContactPointState { position, force, position_rate: None, force_rate: None }
    }

    pub fn with_rates(mut self, position_rate: Vector3<f64>, force_rate: Vector3<f64>) -> Self {
        self.position_rate = Some(position_rate);
        self.force_rate = Some(force_rate);
        self
    }
}

type ScalarField = Rc<dyn Fn(&Vector3<f64>) -> f64>;
type VectorField = Rc<dyn Fn(&Vector3<f64>) -> Vector3<f64>>;
type TangentField = Rc<dyn Fn(&Vector3<f64>) -> SMatrix<f64, 3, 2>>;
type MatrixField = Rc<dyn Fn(&Vector3<f64>) -> Matrix3<f64>>;

/// Walking-surface description: signed height, unit normal and two tangent
/// directions. Gradients default to central finite differences when analytic
/// closures are absent.
#[derive(Clone)]
pub struct GroundModel {
    pub height: ScalarField,
    pub normal: VectorField,
    pub tangents: TangentField,
    pub height_gradient: Option<VectorField>,
    pub normal_jacobian: Option<MatrixField>,
    pub planar: bool,
}

impl GroundModel {
    /// Flat ground at `z = 0`.
    pub fn flat() -> Self {
        GroundModel {
            height: Rc::new(|p: &Vector3<f64>| p.z),
            normal: Rc::new(|_p: &Vector3<f64>| Vector3::z()),
            tangents: Rc::new(|_p: &Vector3<f64>| {
                SMatrix::<f64, 3, 2>::from_columns(&[Vector3::x(), Vector3::y()])
            }),
            height_gradient: Some(Rc::new(|_p: &Vector3<f64>| Vector3::z())),
            normal_jacobian: Some(Rc::new(|_p: &Vector3<f64>| Matrix3::zeros())),
            planar: false,
        }
    }

    /// Flat ground flagged planar: residuals use the reduced planar formulas
    /// where the normal direction and the height coincide with z.
    pub fn planar() -> Self {
        let mut g = Self::flat();
        g.planar = true;
        g
    }

    /// Rotation `[t1 t2 n]` of the plane frame at `p`.
    pub fn plane_rotation(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        let t = (self.tangents)(p);
        let n = (self.normal)(p);
        Matrix3::from_columns(&[t.column(0).into_owned(), t.column(1).into_owned(), n])
    }

    fn height_gradient_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        if let Some(g) = &self.height_gradient {
            return g(p);
        }
        let h = 1e-6;
        let mut grad = Vector3::zeros();
        for a in 0..3 {
            let mut plus = *p;
            let mut minus = *p;
            plus[a] += h;
            minus[a] -= h;
            grad[a] = ((self.height)(&plus) - (self.height)(&minus)) / (2.0 * h);
        }
        grad
    }

    fn normal_jacobian_at(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        if let Some(j) = &self.normal_jacobian {
            return j(p);
        }
        let h = 1e-6;
        let mut jac = Matrix3::zeros();
        for a in 0..3 {
            let mut plus = *p;
            let mut minus = *p;
            plus[a] += h;
            minus[a] -= h;
            jac.set_column(a, &(((self.normal)(&plus) - (self.normal)(&minus)) / (2.0 * h)));
        }
        jac
    }
}

/// Tuning constants of the three complementarity methods, preloaded with the
/// benchmark values.
#[derive(Debug, Clone, Copy)]
pub struct ComplementarityParams {
    /// Relaxed product bound (N m).
    pub epsilon: f64,
    /// Baumgarte gain (1/s).
    pub k_bs: f64,
    /// Dynamic relaxation (N m / s).
    pub epsilon_dynamic: f64,
    /// Normal force dissipation gain (1/s).
    pub k_fz: f64,
    /// Hyperbolic-secant sharpness (1/m).
    pub k_h: f64,
    /// Force-rate control bound per axis (N/s).
    pub m_f: Vector3<f64>,
    /// Point-velocity control bound per axis (m/s).
    pub m_v: Vector3<f64>,
    /// Planar-gate sharpness (1/m).
    pub k_t: f64,
}

impl Default for ComplementarityParams {
    fn default() -> Self {
        ComplementarityParams {
            epsilon: 0.015,
            k_bs: 20.0,
            epsilon_dynamic: 0.2,
            k_fz: 300.0,
            k_h: 350.0,
            m_f: Vector3::from_element(100.0),
            m_v: Vector3::from_element(0.5),
            k_t: 100.0,
        }
    }
}

/// Which complementarity parametrization a planner enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplementarityMode {
    Relaxed,
    DynamicallyEnforced,
    HyperbolicSecant,
}

impl std::str::FromStr for ComplementarityMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relaxed" => Ok(ComplementarityMode::Relaxed),
            "dynamic" | "dynamically-enforced" => Ok(ComplementarityMode::DynamicallyEnforced),
            "secant" | "hyperbolic-secant" => Ok(ComplementarityMode::HyperbolicSecant),
            other => Err(format!("unknown complementarity mode `{other}`")),
        }
    }
}

impl std::fmt::Display for ComplementarityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ComplementarityMode::Relaxed => write!(f, "relaxed"),
            ComplementarityMode::DynamicallyEnforced => write!(f, "dynamic"),
            ComplementarityMode::HyperbolicSecant => write!(f, "secant"),
        }
    }
}

/// Relaxed complementarity residual `h(p) n'f - eps`; satisfied when <= 0.
pub fn relaxed_residual(cp: &ContactPointState, ground: &GroundModel, epsilon: f64) -> f64 {
    let h = (ground.height)(&cp.position);
    let n = (ground.normal)(&cp.position);
    h * n.dot(&cp.force) - epsilon
}

/// Dynamically enforced complementarity residual
/// `zeta + K_bs h n'f - eps_dyn`; satisfied when <= 0. `zeta` is the total
/// time derivative of `h n'f` expanded through the ground gradients; on a
/// planar ground it reduces to `p_z_dot f_z + p_z f_z_dot`.
pub fn dynamic_residual(
    cp: &ContactPointState,
    ground: &GroundModel,
    k_bs: f64,
    epsilon_dynamic: f64,
) -> Result<f64, ContactError> {
    let p_dot = cp.position_rate.ok_or(ContactError::MissingRates)?;
    let f_dot = cp.force_rate.ok_or(ContactError::MissingRates)?;
    let zeta = if ground.planar {
        p_dot.z * cp.force.z + cp.position.z * f_dot.z
    } else {
        let h = (ground.height)(&cp.position);
        let n = (ground.normal)(&cp.position);
        let grad_h = ground.height_gradient_at(&cp.position);
        let jac_n = ground.normal_jacobian_at(&cp.position);
        grad_h.dot(&p_dot) * n.dot(&cp.force)
            + h * cp.force.dot(&(jac_n * p_dot))
            + h * n.dot(&f_dot)
    };
    let h = (ground.height)(&cp.position);
    let n = (ground.normal)(&cp.position);
    Ok(zeta + k_bs * h * n.dot(&cp.force) - epsilon_dynamic)
}

/// Bounds `(lb, ub)` on the normal component of the force-rate control under
/// the hyperbolic-secant parametrization:
/// `lb = -M_fz`, `ub = -K_fz (1 - delta) n'f + delta M_fz` with
/// `delta = sech(k_h h(p))`.
pub fn secant_force_bounds(
    cp: &ContactPointState,
    ground: &GroundModel,
    params: &ComplementarityParams,
) -> (f64, f64) {
    let h = (ground.height)(&cp.position);
    let n = (ground.normal)(&cp.position);
    let delta = sech(params.k_h * h);
    let m_fz = params.m_f.z;
    let lb = -m_fz;
    let ub = -params.k_fz * (1.0 - delta) * n.dot(&cp.force) + delta * m_fz;
    (lb, ub)
}

pub fn sech(x: f64) -> f64 {
    1.0 / x.cosh()
}

/// Point-velocity gate `tau(p) = R_plane diag(tanh(k_t h), tanh(k_t h), 1)`:
/// the planar rows vanish exactly on the ground.
pub fn planar_gate(p: &Vector3<f64>, ground: &GroundModel, k_t: f64) -> Matrix3<f64> {
    let h = (ground.height)(p);
    let gate = (k_t * h).tanh();
    ground.plane_rotation(p) * Matrix3::from_diagonal(&Vector3::new(gate, gate, 1.0))
}

/// Static friction check `|t'f| <= mu n'f`; the margin is
/// `mu n'f - |t'f|` (negative when violated).
pub fn friction_check(f: &Vector3<f64>, ground: &GroundModel, p: &Vector3<f64>, mu: f64) -> (bool, f64) {
    let n = (ground.normal)(p);
    let t = (ground.tangents)(p);
    let tangential = (t.transpose() * f).norm();
    let margin = mu * n.dot(f) - tangential;
    (margin >= 0.0, margin)
}

/// Rectangular foot: length along x, width along y, corners in the order
/// `(+l/2, +d/2), (+l/2, -d/2), (-l/2, +d/2), (-l/2, -d/2)`.
#[derive(Debug, Clone, Copy)]
pub struct FootGeometry {
    pub length: f64,
    pub width: f64,
}

impl FootGeometry {
    pub fn new(length: f64, width: f64) -> Self {
        assert!(length > 0.0 && width > 0.0);
        FootGeometry { length, width }
    }

    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let (l, d) = (self.length / 2.0, self.width / 2.0);
        [
            Vector3::new(l, d, 0.0),
            Vector3::new(l, -d, 0.0),
            Vector3::new(-l, d, 0.0),
            Vector3::new(-l, -d, 0.0),
        ]
    }
}

/// Result of the wrench-to-corner-forces split.
#[derive(Debug, Clone)]
pub struct FourForces {
    pub cop: Vector2<f64>,
    pub alphas: [f64; 4],
    pub corner_forces: [Vector3<f64>; 4],
}

/// Bounds on the normal-force share of corner 4 as a function of the CoP:
/// `max(0, -cop_y/d - cop_x/l) <= alpha_4 <= min(1/2 - cop_y/d, 1/2 - cop_x/l)`.
pub fn alpha4_bounds(cop: &Vector2<f64>, geom: &FootGeometry) -> (f64, f64) {
    let (l, d) = (geom.length, geom.width);
    let lower = (0.0f64).max(-cop.y / d - cop.x / l);
    let upper = (0.5 - cop.y / d).min(0.5 - cop.x / l);
    (lower, upper)
}

/// Splits a wrench applied at the foot-frame origin into four corner forces.
///
/// Normal shares: `alpha_4` is the midpoint of its bounds, the others follow
/// from the torque balance. Tangential components take the minimum-norm
/// solution of the remaining three balance equations.
pub fn four_forces(wrench: &Vector6<f64>, geom: &FootGeometry) -> Result<FourForces, ContactError> {
    let force: Vector3<f64> = wrench.fixed_rows::<3>(0).into();
    let torque: Vector3<f64> = wrench.fixed_rows::<3>(3).into();
    let fz = force.z;
    if fz <= 0.0 {
        return Err(ContactError::NonPositiveNormalForce(fz));
    }
    let cop = Vector2::new(-torque.y / fz, torque.x / fz);
    let (l, d) = (geom.length, geom.width);
    if cop.x.abs() > l / 2.0 + 1e-12 || cop.y.abs() > d / 2.0 + 1e-12 {
        return Err(ContactError::CopOutsideFoot(cop.x, cop.y));
    }

    let (lower, upper) = alpha4_bounds(&cop, geom);
    let alpha4 = 0.5 * (lower + upper);
    let alpha1 = alpha4 + cop.x / l + cop.y / d;
    let alpha2 = -alpha4 + 0.5 - cop.y / d;
    let alpha3 = -alpha4 + 0.5 - cop.x / l;
    let alphas = [alpha1, alpha2, alpha3, alpha4];

    // Tangential split: three equations (force x, force y, torque z) in
    // eight unknowns, solved by pseudo-inverse.
    let corners = geom.corners();
    let mut a = DMatrix::zeros(3, 8);
    for (i, corner) in corners.iter().enumerate() {
        a[(0, 2 * i)] = 1.0;
        a[(1, 2 * i + 1)] = 1.0;
        a[(2, 2 * i)] = -corner.y;
        a[(2, 2 * i + 1)] = corner.x;
    }
    let rhs = DVector::from_vec(vec![force.x, force.y, torque.z]);
    let tangential = a.svd(true, true).solve(&rhs, 1e-14).map_err(|_| ContactError::NnlsFailed)?;

    let mut corner_forces = [Vector3::zeros(); 4];
    for i in 0..4 {
        corner_forces[i] = Vector3::new(tangential[2 * i], tangential[2 * i + 1], alphas[i] * fz);
    }
    Ok(FourForces { cop, alphas, corner_forces })
}

/// Reconstructs the wrench at the foot origin from corner forces; the inverse
/// direction of [`four_forces`].
pub fn wrench_from_corner_forces(forces: &[Vector3<f64>; 4], geom: &FootGeometry) -> Vector6<f64> {
    let corners = geom.corners();
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for (f, p) in forces.iter().zip(corners.iter()) {
        force += f;
        torque += p.cross(f);
    }
    let mut w = Vector6::zeros();
    w.fixed_rows_mut::<3>(0).copy_from(&force);
    w.fixed_rows_mut::<3>(3).copy_from(&torque);
    w
}

/// Linearized friction cone: `m` rays evenly spaced on the cone surface with
/// tangential radius `mu`. Any non-negative combination satisfies the exact
/// quadratic cone; the polyhedral cone is inscribed with effective
/// coefficient `mu cos(pi / m)`.
#[derive(Debug, Clone)]
pub struct ConeRays {
    pub rays: DMatrix<f64>,
    pub mu: f64,
}

pub fn cone_rays(normal: &Vector3<f64>, mu: f64, m: usize) -> Result<ConeRays, ContactError> {
    if m < 3 {
        return Err(ContactError::TooFewRays(m));
    }
    let n = normal.normalize();
    let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = (seed - n.dot(&seed) * n).normalize();
    let t2 = n.cross(&t1);
    let mut rays = DMatrix::zeros(3, m);
    for i in 0..m {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
        let ray = (n + mu * (theta.cos() * t1 + theta.sin() * t2)).normalize();
        rays.set_column(i, &ray);
    }
    Ok(ConeRays { rays, mu })
}

impl ConeRays {
    pub fn ray_count(&self) -> usize {
        self.rays.ncols()
    }

    /// Force from the ray coordinates, `f = sum rho_i r_i`.
    pub fn force(&self, rho: &DVector<f64>) -> Vector3<f64> {
        let f = &self.rays * rho;
        Vector3::new(f[0], f[1], f[2])
    }

    /// Ray coordinates of a force via non-negative least squares.
    pub fn coordinates(&self, force: &Vector3<f64>) -> Result<DVector<f64>, ContactError> {
        let b = DVector::from_vec(vec![force.x, force.y, force.z]);
        nnls(&self.rays, &b)
    }
}

/// Lawson-Hanson non-negative least squares for small dense systems.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, ContactError> {
    let n = a.ncols();
    let mut passive = vec![false; n];
    let mut x = DVector::zeros(n);
    let tol = 1e-12 * a.amax().max(1.0) * b.amax().max(1.0);

    for _ in 0..(6 * n + 30) {
        let residual = b - a * &x;
        let w = a.transpose() * &residual;
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap());
        match candidate {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => return Ok(x),
        }

        loop {
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let mut ap = DMatrix::zeros(a.nrows(), cols.len());
            for (c, &j) in cols.iter().enumerate() {
                ap.set_column(c, &a.column(j));
            }
            let z = ap.svd(true, true).solve(b, 1e-14).map_err(|_| ContactError::NnlsFailed)?;
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (c, &j) in cols.iter().enumerate() {
                    x[j] = z[c];
                }
                break;
            }
            // Step back to the boundary and deactivate a coordinate.
            let mut alpha = f64::INFINITY;
            for (c, &j) in cols.iter().enumerate() {
                if z[c] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - z[c]));
                }
            }
            for (c, &j) in cols.iter().enumerate() {
                x[j] += alpha * (z[c] - x[j]);
                if x[j] <= 1e-14 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    Err(ContactError::NnlsFailed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relaxed_residual_cases() {
        let ground = GroundModel::flat();
        // On the ground: residual is exactly -eps.
        let cp = ContactPointState::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 30.0));
        assert_relative_eq!(relaxed_residual(&cp, &ground, 0.015), -0.015);

        // h = 0.01, f_z = 1, eps = 0.015: satisfied by 0.005.
        let cp = ContactPointState::new(Vector3::new(0.0, 0.0, 0.01), Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(relaxed_residual(&cp, &ground, 0.015), -0.005, epsilon = 1e-15);

        // h = 0.02, f_z = 1: violated by 0.005.
        let cp = ContactPointState::new(Vector3::new(0.0, 0.0, 0.02), Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(relaxed_residual(&cp, &ground, 0.015), 0.005, epsilon = 1e-15);
    }

    #[test]
    fn dynamic_residual_cases() {
        let ground = GroundModel::planar();
        // p_z = 0, p_z_dot = 0: residual reduces to -eps_dyn.
        let cp = ContactPointState::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 10.0))
            .with_rates(Vector3::zeros(), Vector3::new(0.0, 0.0, -5.0));
        assert_relative_eq!(dynamic_residual(&cp, &ground, 20.0, 0.2).unwrap(), -0.2);

        // A product decaying exactly as e^(-K_bs t) sits on the residual
        // boundary shifted by -eps_dyn: d/dt(h f) = -K_bs (h f).
        let k_bs = 20.0;
        let (h, fz) = (0.004, 2.0);
        let h_dot = -0.5 * k_bs * h;
        let f_dot = -0.5 * k_bs * fz;
        let cp = ContactPointState::new(Vector3::new(0.0, 0.0, h), Vector3::new(0.0, 0.0, fz))
            .with_rates(Vector3::new(0.0, 0.0, h_dot), Vector3::new(0.0, 0.0, f_dot));
        assert_relative_eq!(dynamic_residual(&cp, &ground, k_bs, 0.2).unwrap(), -0.2, epsilon = 1e-12);

        // Missing rates rejected.
        let cp = ContactPointState::new(Vector3::zeros(), Vector3::zeros());
        assert!(dynamic_residual(&cp, &ground, k_bs, 0.2).is_err());
    }

    #[test]
    fn dynamic_residual_planar_matches_general() {
        let planar = GroundModel::planar();
        // Same flat ground through the general formula with its analytic
        // gradients.
        let general = GroundModel::flat();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let cp = ContactPointState::new(
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.05)),
                Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..50.0)),
            )
            .with_rates(
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)),
            );
            let a = dynamic_residual(&cp, &planar, 20.0, 0.2).unwrap();
            let b = dynamic_residual(&cp, &general, 20.0, 0.2).unwrap();
            assert!((a - b).abs() < 1e-12, "planar {a} vs general {b}");
        }
    }

    #[test]
    fn secant_bounds_cases() {
        let ground = GroundModel::flat();
        let params = ComplementarityParams::default();

        // On the ground sech(0) = 1: bounds are (-100, +100) N/s.
        let cp = ContactPointState::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 40.0));
        let (lb, ub) = secant_force_bounds(&cp, &ground, &params);
        assert_relative_eq!(lb, -100.0);
        assert_relative_eq!(ub, 100.0, epsilon = 1e-12);

        // High point (k_h h >= 20), f_z = 2 N: the upper bound approaches
        // -K_fz f_z = -600 N/s.
        let cp = ContactPointState::new(Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.0, 0.0, 2.0));
        let (lb, ub) = secant_force_bounds(&cp, &ground, &params);
        assert_relative_eq!(lb, -100.0);
        assert_relative_eq!(ub, -600.0, epsilon = 1e-10);

        // Zero force: the ordering lb <= 0 <= ub holds at any height.
        for h in [0.0, 0.001, 0.01, 0.5] {
            let cp = ContactPointState::new(Vector3::new(0.0, 0.0, h), Vector3::zeros());
            let (lb, ub) = secant_force_bounds(&cp, &ground, &params);
            assert!(lb <= ub && ub >= 0.0 && lb <= 0.0);
        }
    }

    #[test]
    fn secant_bound_forces_decay_rate() {
        // Holding h > 0 fixed and pinning u_f to the upper bound, the normal
        // force decays at rate at least K_fz (1 - delta(h)).
        let ground = GroundModel::flat();
        let params = ComplementarityParams::default();
        let h = 0.02;
        let dt = 1e-4;
        let mut fz = 10.0;
        let delta = sech(params.k_h * h);
        let rate = params.k_fz * (1.0 - delta);
        let mut t = 0.0;
        for _ in 0..2000 {
            let cp = ContactPointState::new(Vector3::new(0.0, 0.0, h), Vector3::new(0.0, 0.0, fz));
            let (_, ub) = secant_force_bounds(&cp, &ground, &params);
            fz += dt * ub;
            t += dt;
        }
        // Analytic envelope: the decay fights the delta M_f feed-through.
        let envelope = 10.0 * (-rate * t).exp() + delta * params.m_f.z / rate;
        assert!(fz <= envelope + 1e-9, "fz {fz} above envelope {envelope}");
    }

    #[test]
    fn complementarity_residuals_are_continuous() {
        // Small perturbations in (p, f, rates) move every residual by O(step).
        let ground = GroundModel::planar();
        let params = ComplementarityParams::default();
        let base = ContactPointState::new(Vector3::new(0.1, 0.0, 0.003), Vector3::new(1.0, 0.5, 12.0))
            .with_rates(Vector3::new(0.1, -0.1, 0.05), Vector3::new(1.0, 0.0, -3.0));
        let eps = 1e-7;
        for axis in 0..3 {
            let mut moved = base.clone();
            moved.position[axis] += eps;
            moved.force[axis] -= eps;
            let dr = (relaxed_residual(&moved, &ground, params.epsilon)
                - relaxed_residual(&base, &ground, params.epsilon))
            .abs();
            let dd = (dynamic_residual(&moved, &ground, params.k_bs, params.epsilon_dynamic).unwrap()
                - dynamic_residual(&base, &ground, params.k_bs, params.epsilon_dynamic).unwrap())
            .abs();
            let (lb_a, ub_a) = secant_force_bounds(&base, &ground, &params);
            let (lb_b, ub_b) = secant_force_bounds(&moved, &ground, &params);
            assert!(dr < 1e-4 && dd < 1e-4);
            // The secant bound is steep in h (slope ~ K_fz k_h f) but still
            // Lipschitz; scale the tolerance accordingly.
            let lipschitz = params.k_fz * params.k_h * base.force.z.abs() + params.k_h * params.m_f.z;
            assert!((lb_a - lb_b).abs() < 1e-4 && (ub_a - ub_b).abs() < 2.0 * lipschitz * eps);
        }
    }

    #[test]
    fn planar_gate_cases() {
        let ground = GroundModel::flat();
        let tau0 = planar_gate(&Vector3::zeros(), &ground, 100.0);
        assert_relative_eq!(tau0, Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0)), epsilon = 1e-15);

        let tau_high = planar_gate(&Vector3::new(0.0, 0.0, 10.0), &ground, 100.0);
        assert_relative_eq!(tau_high, Matrix3::identity(), epsilon = 1e-12);

        let tau = planar_gate(&Vector3::new(0.0, 0.0, 0.01), &ground, 100.0);
        assert_relative_eq!(tau[(0, 0)], 1f64.tanh(), epsilon = 1e-12);
        assert_relative_eq!(tau[(1, 1)], 1f64.tanh(), epsilon = 1e-12);
        assert_relative_eq!(tau[(2, 2)], 1.0);
    }

    #[test]
    fn friction_check_cases() {
        let ground = GroundModel::flat();
        let p = Vector3::zeros();
        let (ok, margin) = friction_check(&Vector3::new(0.0, 0.0, 10.0), &ground, &p, 0.5);
        assert!(ok);
        assert_relative_eq!(margin, 5.0);

        // Boundary: tangential exactly mu * normal.
        let (ok, margin) = friction_check(&Vector3::new(5.0, 0.0, 10.0), &ground, &p, 0.5);
        assert!(ok);
        assert_relative_eq!(margin, 0.0, epsilon = 1e-12);

        // Negative normal force: violated for any tangential component.
        let (ok, margin) = friction_check(&Vector3::new(0.1, 0.0, -1.0), &ground, &p, 0.5);
        assert!(!ok && margin < 0.0);
    }

    #[test]
    fn four_forces_center_and_corners() {
        let geom = FootGeometry::new(0.2, 0.1);
        // CoP at the center: equal quarters.
        let mut w = Vector6::zeros();
        w[2] = 100.0;
        let out = four_forces(&w, &geom).unwrap();
        for a in out.alphas {
            assert_relative_eq!(a, 0.25, epsilon = 1e-12);
        }

        // tau_x = -5, tau_y = 10 puts the CoP at corner 4: alpha_4 = 1.
        let mut w = Vector6::zeros();
        w[2] = 100.0;
        w[3] = -5.0;
        w[4] = 10.0;
        let out = four_forces(&w, &geom).unwrap();
        assert_relative_eq!(out.cop, Vector2::new(-0.1, -0.05), epsilon = 1e-12);
        assert_relative_eq!(out.alphas[3], 1.0, epsilon = 1e-12);
        for a in &out.alphas[..3] {
            assert_relative_eq!(*a, 0.0, epsilon = 1e-12);
        }

        // CoP at the opposite corner 1: alpha_4 = 0.
        let mut w = Vector6::zeros();
        w[2] = 100.0;
        w[3] = 5.0;
        w[4] = -10.0;
        let out = four_forces(&w, &geom).unwrap();
        assert_relative_eq!(out.alphas[3], 0.0, epsilon = 1e-12);
        assert_relative_eq!(out.alphas[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn four_forces_rejects_bad_inputs() {
        let geom = FootGeometry::new(0.2, 0.1);
        let mut w = Vector6::zeros();
        w[2] = -1.0;
        assert!(matches!(four_forces(&w, &geom), Err(ContactError::NonPositiveNormalForce(_))));

        let mut w = Vector6::zeros();
        w[2] = 1.0;
        w[4] = 1.0; // cop_x = -1.0, far outside
        assert!(matches!(four_forces(&w, &geom), Err(ContactError::CopOutsideFoot(_, _))));
    }

    #[test]
    fn four_forces_reconstruct_random_wrenches() {
        let geom = FootGeometry::new(0.2, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let fz = rng.gen_range(5.0..200.0);
            let cop_x = rng.gen_range(-0.099..0.099);
            let cop_y = rng.gen_range(-0.049..0.049);
            let mut w = Vector6::zeros();
            w[0] = rng.gen_range(-20.0..20.0);
            w[1] = rng.gen_range(-20.0..20.0);
            w[2] = fz;
            w[3] = cop_y * fz;
            w[4] = -cop_x * fz;
            w[5] = rng.gen_range(-3.0..3.0);
            let out = four_forces(&w, &geom).unwrap();
            // Shares sum to one and lie in [0, 1].
            let total: f64 = out.alphas.iter().sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-10);
            for a in out.alphas {
                assert!((-1e-12..=1.0 + 1e-12).contains(&a));
            }
            let back = wrench_from_corner_forces(&out.corner_forces, &geom);
            assert!((back - w).amax() < 1e-10, "reconstruction error {}", (back - w).amax());
            // alpha_4 bound identity.
            let (lo, hi) = alpha4_bounds(&out.cop, &geom);
            assert!(out.alphas[3] >= lo - 1e-12 && out.alphas[3] <= hi + 1e-12);
        }
    }

    #[test]
    fn four_forces_reports_per_corner_friction() {
        // The aggregate wrench can satisfy friction while a corner force does
        // not; the decomposition reports the split without redistributing.
        let geom = FootGeometry::new(0.2, 0.1);
        let ground = GroundModel::flat();
        let mut w = Vector6::zeros();
        w[0] = 30.0;
        w[2] = 100.0;
        w[5] = 2.8;
        let (total_ok, _) = friction_check(&Vector3::new(w[0], w[1], w[2]), &ground, &Vector3::zeros(), 0.4);
        assert!(total_ok);
        let out = four_forces(&w, &geom).unwrap();
        let any_violation = out
            .corner_forces
            .iter()
            .any(|f| !friction_check(f, &ground, &Vector3::zeros(), 0.4).0);
        assert!(any_violation, "expected at least one corner outside the cone");
    }

    #[test]
    fn cone_rays_basics() {
        assert!(cone_rays(&Vector3::z(), 0.5, 2).is_err());
        let cone = cone_rays(&Vector3::z(), 0.5, 8).unwrap();
        assert_eq!(cone.ray_count(), 8);

        // rho = 0 gives zero force; a single active ray returns that ray.
        assert_relative_eq!(cone.force(&DVector::zeros(8)).norm(), 0.0);
        let mut rho = DVector::zeros(8);
        rho[3] = 2.0;
        let f = cone.force(&rho);
        assert_relative_eq!(f.norm(), 2.0, epsilon = 1e-12);

        // Any non-negative combination satisfies the exact quadratic cone.
        let ground = GroundModel::flat();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let rho = DVector::from_fn(8, |_, _| rng.gen_range(0.0..3.0));
            let f = cone.force(&rho);
            let (ok, _) = friction_check(&f, &ground, &Vector3::zeros(), 0.5);
            assert!(ok);
        }
    }

    #[test]
    fn cone_rays_round_trip_interior_forces() {
        let mu = 0.6;
        let m = 8;
        let cone = cone_rays(&Vector3::z(), mu, m).unwrap();
        let inscribed = mu * (std::f64::consts::PI / m as f64).cos();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let fz = rng.gen_range(1.0..100.0);
            let radius = rng.gen_range(0.0..0.95) * inscribed * fz;
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let f = Vector3::new(radius * theta.cos(), radius * theta.sin(), fz);
            let rho = cone.coordinates(&f).unwrap();
            assert!(rho.iter().all(|&r| r >= 0.0));
            let back = cone.force(&rho);
            assert!((back - f).norm() < 1e-8, "round-trip error {}", (back - f).norm());
        }
    }

    #[test]
    fn default_params_match_benchmark_values() {
        let p = ComplementarityParams::default();
        assert_eq!(p.epsilon, 0.015);
        assert_eq!(p.k_bs, 20.0);
        assert_eq!(p.epsilon_dynamic, 0.2);
        assert_eq!(p.k_fz, 300.0);
        assert_eq!(p.k_h, 350.0);
        assert_eq!(p.m_f, Vector3::from_element(100.0));
    }
}
