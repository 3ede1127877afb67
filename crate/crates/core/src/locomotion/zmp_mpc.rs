//! Constrained ZMP preview control: multiple-shooting transcription of the
//! cart-table system to a QP with time-varying support-polygon bounds,
//! applied in receding horizon.

use super::footsteps::{Foot, GaitPlan};
use super::LocomotionError;
use crate::contact::FootGeometry;
use crate::ocp::{MpcPlan, VariableLayout};
use crate::simplified::{cart_table_system, CartTableSystem, ZmpOutputGain};
use crate::solvers::{qp_kkt_report, solve_qp_active_set, QpProblem, SolverError};
use nalgebra::{DMatrix, DVector, SVector, Vector2};

/// Planar convex polygon in half-space form `A z <= b`.
#[derive(Debug, Clone)]
pub struct Polygon2 {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub vertices: Vec<Vector2<f64>>,
}

impl Polygon2 {
    /// Signed margin `min_i (b_i - a_i' z)`; non-negative inside.
    pub fn margin(&self, z: &Vector2<f64>) -> f64 {
        let values = &self.a * z;
        (0..self.b.len()).map(|i| self.b[i] - values[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, z: &Vector2<f64>, tol: f64) -> bool {
        self.margin(z) >= -tol
    }

    pub fn centroid(&self) -> Vector2<f64> {
        let mut c = Vector2::zeros();
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }
}

/// Andrew monotone-chain convex hull, counter-clockwise without repetition.
pub fn convex_hull_2d(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Half-space form of a counter-clockwise hull.
pub fn polygon_from_hull(hull: &[Vector2<f64>]) -> Polygon2 {
    assert!(hull.len() >= 3, "polygon needs at least 3 vertices");
    let m = hull.len();
    let mut a = DMatrix::zeros(m, 2);
    let mut b = DVector::zeros(m);
    for i in 0..m {
        let p = hull[i];
        let q = hull[(i + 1) % m];
        let edge = q - p;
        // Outward normal of a CCW polygon.
        let normal = Vector2::new(edge.y, -edge.x).normalize();
        a[(i, 0)] = normal.x;
        a[(i, 1)] = normal.y;
        b[i] = normal.dot(&p);
    }
    Polygon2 { a, b, vertices: hull.to_vec() }
}

fn foot_corners(pose: &(Vector2<f64>, f64), geometry: &FootGeometry) -> Vec<Vector2<f64>> {
    let r = super::unicycle::rotation2(pose.1);
    geometry
        .corners()
        .iter()
        .map(|c| pose.0 + r * Vector2::new(c.x, c.y))
        .collect()
}

/// Support polygon of the gait at time `t`: hull of the corners of every
/// foot on the ground.
pub fn gait_support_polygon(plan: &GaitPlan, geometry: &FootGeometry, t: f64) -> Polygon2 {
    let (left, right) = plan.feet_at(t);
    let swing = plan.swing_foot_at(t);
    let mut corners = Vec::new();
    if swing != Some(Foot::Left) {
        corners.extend(foot_corners(&left, geometry));
    }
    if swing != Some(Foot::Right) {
        corners.extend(foot_corners(&right, geometry));
    }
    polygon_from_hull(&convex_hull_2d(&corners))
}

/// Piecewise-linear desired ZMP: foot centers connected across the double
/// supports, starting and ending between the feet.
pub fn gait_zmp_reference(plan: &GaitPlan, t: f64) -> Vector2<f64> {
    let ds = plan.double_support;
    let mut knots: Vec<(f64, Vector2<f64>)> = Vec::new();
    let mid0 = 0.5 * (plan.initial.left.0 + plan.initial.right.0);
    knots.push((plan.start_time, mid0));
    if let Some(first) = plan.footsteps.first() {
        // Shift onto the first stance foot before the swing starts.
        let stance = match first.foot {
            Foot::Left => plan.initial.right.0,
            Foot::Right => plan.initial.left.0,
        };
        let shift_end = (plan.start_time + ds).min(first.impact_time);
        knots.push((shift_end, stance));
        knots.push((first.impact_time, stance));
    }
    for (i, step) in plan.footsteps.iter().enumerate() {
        // After this impact the landed foot becomes the stance foot.
        knots.push((step.impact_time + ds, step.position));
        let next = plan.footsteps.get(i + 1).map(|s| s.impact_time).unwrap_or(plan.horizon_end);
        knots.push((next.max(step.impact_time + ds), step.position));
    }
    // Settle between the final feet.
    let (left_end, right_end) = plan.feet_at(plan.horizon_end);
    let mid_end = 0.5 * (left_end.0 + right_end.0);
    let last_knot = knots.last().map(|k| k.0).unwrap_or(plan.start_time);
    knots.push((last_knot + ds, mid_end));

    // Piecewise-linear interpolation with clamped ends.
    if t <= knots[0].0 {
        return knots[0].1;
    }
    for pair in knots.windows(2) {
        let (t0, p0) = pair[0];
        let (t1, p1) = pair[1];
        if t <= t1 {
            if t1 - t0 < 1e-12 {
                return p1;
            }
            let s = (t - t0) / (t1 - t0);
            return (1.0 - s) * p0 + s * p1;
        }
    }
    knots.last().unwrap().1
}

/// Tuning of the constrained preview controller.
#[derive(Debug, Clone)]
pub struct ZmpMpcParams {
    pub horizon: usize,
    pub dt: f64,
    /// Output tracking weight per planar axis.
    pub q: f64,
    /// Jerk effort weight per planar axis.
    pub r: f64,
    pub omega: f64,
    pub gain_mode: ZmpOutputGain,
}

impl ZmpMpcParams {
    pub fn system(&self) -> CartTableSystem {
        cart_table_system(self.omega, self.gain_mode).expect("omega validated by caller")
    }
}

/// One constrained preview solve: transcribes the cart-table dynamics by
/// multiple shooting (forward Euler over the horizon), bounds the output ZMP
/// by the time-varying polygon at every node, solves the QP with the
/// active-set method and returns the first jerk with the predicted plan.
pub fn zmp_mpc_step(
    chi0: &SVector<f64, 6>,
    zmp_reference: &dyn Fn(f64) -> Vector2<f64>,
    polygon: &dyn Fn(f64) -> Polygon2,
    t0: f64,
    params: &ZmpMpcParams,
) -> Result<(Vector2<f64>, MpcPlan), LocomotionError> {
    let sys = params.system();
    let n = 6;
    let m = 2;
    let big_n = params.horizon;
    let dt = params.dt;
    let layout = VariableLayout { state_dim: n, control_dim: m, intervals: big_n };
    let dim = layout.dim();

    let ad = DMatrix::identity(n, n) + dt * sys.a_dyn();
    let bd = dt * sys.b_dyn();
    let c = sys.c_dyn();

    // Cost 1/2 z'Hz + g'z from the discretized tracking objective.
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    let ctqc = 2.0 * dt * params.q * c.transpose() * &c;
    for k in 1..=big_n {
        let r = layout.state(k);
        h.view_mut((r.start, r.start), (n, n)).copy_from(&ctqc);
        // Ridge keeps the Hessian nonsingular on the output nullspace.
        for j in r.clone() {
            h[(j, j)] += 1e-10;
        }
        let reference = zmp_reference(t0 + k as f64 * dt);
        let gx = -2.0 * dt * params.q * c.transpose() * reference;
        for (offset, j) in r.enumerate() {
            g[j] += gx[offset];
        }
    }
    for k in 0..big_n {
        let r = layout.control(k);
        for j in r {
            h[(j, j)] += 2.0 * dt * params.r;
        }
    }

    // Shooting defects x_{k+1} - Ad x_k - Bd u_k = 0 (x_0 is data).
    let mut eq = DMatrix::zeros(n * big_n, dim);
    let mut eq_rhs = DVector::zeros(n * big_n);
    for k in 0..big_n {
        let row = k * n;
        eq.view_mut((row, layout.state(k + 1).start), (n, n))
            .copy_from(&DMatrix::identity(n, n));
        eq.view_mut((row, layout.control(k).start), (n, m)).copy_from(&(-&bd));
        if k == 0 {
            let rhs = &ad * DVector::from_column_slice(chi0.as_slice());
            eq_rhs.rows_mut(row, n).copy_from(&rhs);
        } else {
            eq.view_mut((row, layout.state(k).start), (n, n)).copy_from(&(-&ad));
        }
    }

    // Polygon rows (A C) x_k <= b at each node.
    let polygons: Vec<Polygon2> = (1..=big_n).map(|k| polygon(t0 + k as f64 * dt)).collect();
    let total_rows: usize = polygons.iter().map(|p| p.b.len()).sum();
    let mut ineq = DMatrix::zeros(total_rows, dim);
    let mut ineq_upper = DVector::zeros(total_rows);
    let mut row = 0;
    for (k, poly) in polygons.iter().enumerate() {
        let rows = poly.b.len();
        let block = &poly.a * &c;
        ineq.view_mut((row, layout.state(k + 1).start), (rows, n)).copy_from(&block);
        ineq_upper.rows_mut(row, rows).copy_from(&poly.b);
        row += rows;
    }

    let qp = QpProblem {
        hessian: h,
        gradient: g,
        eq_matrix: eq,
        eq_vector: eq_rhs,
        ineq_matrix: ineq,
        ineq_lower: DVector::from_element(total_rows, f64::NEG_INFINITY),
        ineq_upper,
        var_lower: DVector::from_element(dim, f64::NEG_INFINITY),
        var_upper: DVector::from_element(dim, f64::INFINITY),
    };

    let solution = solve_qp_active_set(&qp, None).map_err(|e| match e {
        SolverError::Infeasible(detail) => {
            // Name the first node whose polygon cannot hold the output.
            let node = polygons
                .iter()
                .position(|p| p.margin(&p.centroid()) < 0.0)
                .map(|k| k + 1)
                .unwrap_or(1);
            LocomotionError::Infeasible { node, detail }
        }
        other => LocomotionError::Solver(other),
    })?;
    let report = qp_kkt_report(&qp, &solution);

    let chi0_dyn = DVector::from_column_slice(chi0.as_slice());
    let states = layout.extract_states(&chi0_dyn, &solution.x);
    let controls = layout.extract_controls(&solution.x);
    let first = Vector2::new(controls[0][0], controls[0][1]);
    let plan = MpcPlan {
        controls,
        states,
        cost: solution.cost,
        iterations: solution.iterations,
        kkt_residual: report.worst(),
        feasibility: report.primal_eq.max(report.primal_ineq),
    };
    Ok((first, plan))
}
