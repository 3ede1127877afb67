//! Optimality machinery: KKT residuals, a dense active-set QP solver, a
//! log-barrier Newton NLP solver and Riccati-based LQR.
//!
//! Linear algebra is dense throughout; problems are desk scale. Gradients and
//! Jacobians default to central finite differences with a relative-scaled
//! step unless the problem supplies analytic callables.

use crate::ocp::{fd_step, NlpProblem};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("problem is unbounded below")]
    Unbounded,
    #[error("iteration limit reached: {0}")]
    MaxIterations(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// KKT residuals
// ---------------------------------------------------------------------------

/// Primal point with equality and inequality multipliers.
#[derive(Debug, Clone)]
pub struct KktPoint {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
}

/// The five first-order optimality residuals, reported separately.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// Infinity norm of the Lagrangian gradient.
    pub stationarity: f64,
    /// Infinity norm of the equality residual.
    pub primal_eq: f64,
    /// Largest inequality violation, `max(h_i, 0)`.
    pub primal_ineq: f64,
    /// Largest negative multiplier, `max(-lambda_i, 0)`.
    pub dual_feasibility: f64,
    /// `max_k |lambda_k h_k|`.
    pub complementarity: f64,
}

impl KktReport {
    pub fn worst(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Problem callables for the KKT check. Inequalities use the `h(x) <= 0`
/// convention. Missing gradients fall back to central finite differences.
pub struct KktFunctions<'a> {
    pub cost: &'a dyn Fn(&DVector<f64>) -> f64,
    pub cost_gradient: Option<&'a dyn Fn(&DVector<f64>) -> DVector<f64>>,
    pub equalities: Option<&'a dyn Fn(&DVector<f64>) -> DVector<f64>>,
    pub eq_jacobian: Option<&'a dyn Fn(&DVector<f64>) -> DMatrix<f64>>,
    pub inequalities: Option<&'a dyn Fn(&DVector<f64>) -> DVector<f64>>,
    pub ineq_jacobian: Option<&'a dyn Fn(&DVector<f64>) -> DMatrix<f64>>,
}

fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let dn = f(&xp);
        xp[j] = x[j];
        g[j] = (up - dn) / (2.0 * h);
    }
    g
}

fn fd_jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let dn = f(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((up - dn) / (2.0 * h)));
    }
    jac
}

/// Evaluates the five KKT residuals at `point`.
pub fn kkt_residual(funcs: &KktFunctions, point: &KktPoint) -> KktReport {
    let x = &point.x;
    let mut lagrangian_grad = match funcs.cost_gradient {
        Some(g) => g(x),
        None => fd_gradient(funcs.cost, x),
    };

    let mut primal_eq = 0.0;
    if let Some(eq) = funcs.equalities {
        let he = eq(x);
        primal_eq = he.amax();
        let je = match funcs.eq_jacobian {
            Some(j) => j(x),
            None => fd_jacobian(eq, x),
        };
        lagrangian_grad += je.transpose() * &point.eq_multipliers;
    }

    let mut primal_ineq: f64 = 0.0;
    let mut dual_feasibility: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    if let Some(ineq) = funcs.inequalities {
        let hi = ineq(x);
        for i in 0..hi.len() {
            primal_ineq = primal_ineq.max(hi[i].max(0.0));
            dual_feasibility = dual_feasibility.max((-point.ineq_multipliers[i]).max(0.0));
            complementarity = complementarity.max((point.ineq_multipliers[i] * hi[i]).abs());
        }
        let ji = match funcs.ineq_jacobian {
            Some(j) => j(x),
            None => fd_jacobian(ineq, x),
        };
        lagrangian_grad += ji.transpose() * &point.ineq_multipliers;
    }

    KktReport {
        stationarity: lagrangian_grad.amax(),
        primal_eq,
        primal_ineq,
        dual_feasibility,
        complementarity,
    }
}

// ---------------------------------------------------------------------------
// Dense active-set QP
// ---------------------------------------------------------------------------

/// Convex quadratic program `min 1/2 x'Hx + g'x` with equalities, two-sided
/// linear inequalities and variable bounds. Infinite bounds mark absent rows.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_vector: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    pub ineq_upper: DVector<f64>,
    pub var_lower: DVector<f64>,
    pub var_upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        QpProblem {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_vector: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            ineq_upper: DVector::zeros(0),
            var_lower: DVector::from_element(n, f64::NEG_INFINITY),
            var_upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.dim();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(SolverError::Invalid("Hessian shape".into()));
        }
        if (&self.hessian - self.hessian.transpose()).amax() > 1e-10 {
            return Err(SolverError::Invalid("Hessian not symmetric within 1e-10".into()));
        }
        if self.eq_matrix.ncols() != n && self.eq_matrix.nrows() > 0 {
            return Err(SolverError::Invalid("equality matrix width".into()));
        }
        if self.eq_matrix.nrows() != self.eq_vector.len() {
            return Err(SolverError::Invalid("equality vector length".into()));
        }
        if self.ineq_matrix.nrows() != self.ineq_lower.len()
            || self.ineq_matrix.nrows() != self.ineq_upper.len()
        {
            return Err(SolverError::Invalid("inequality bounds length".into()));
        }
        if self.var_lower.len() != n || self.var_upper.len() != n {
            return Err(SolverError::Invalid("variable bounds length".into()));
        }
        Ok(())
    }
}

/// One-sided form `a'x <= b` of all inequalities and variable bounds of a QP,
/// in a fixed order: inequality uppers, inequality lowers, variable uppers,
/// variable lowers (rows with infinite bounds skipped).
pub fn canonical_inequalities(qp: &QpProblem) -> (DMatrix<f64>, DVector<f64>) {
    let n = qp.dim();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..qp.ineq_matrix.nrows() {
        if qp.ineq_upper[i].is_finite() {
            rows.push((qp.ineq_matrix.row(i).transpose(), qp.ineq_upper[i]));
        }
    }
    for i in 0..qp.ineq_matrix.nrows() {
        if qp.ineq_lower[i].is_finite() {
            rows.push((-qp.ineq_matrix.row(i).transpose(), -qp.ineq_lower[i]));
        }
    }
    for j in 0..n {
        if qp.var_upper[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = 1.0;
            rows.push((a, qp.var_upper[j]));
        }
    }
    for j in 0..n {
        if qp.var_lower[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = -1.0;
            rows.push((a, -qp.var_lower[j]));
        }
    }
    let m = rows.len();
    let mut a_mat = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    for (i, (a, bi)) in rows.into_iter().enumerate() {
        a_mat.row_mut(i).copy_from(&a.transpose());
        b[i] = bi;
    }
    (a_mat, b)
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// Multipliers on the canonical one-sided rows, zero off the active set.
    pub ineq_multipliers: DVector<f64>,
    /// Canonical row indices active at the solution.
    pub active_set: Vec<usize>,
    pub iterations: usize,
    /// Number of equality-constrained subproblem solves performed.
    pub eqp_solves: usize,
    pub cost: f64,
}

const QP_FEAS_TOL: f64 = 1e-9;
const QP_MULT_TOL: f64 = 1e-10;

struct EqpResult {
    step: DVector<f64>,
    eq_multipliers: DVector<f64>,
    working_multipliers: DVector<f64>,
}

/// Equality-constrained solve of `min 1/2 p'Hp + g'p` s.t. `A_eq p = r_eq`,
/// `A_w p = r_w` through the KKT system.
fn solve_eqp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    r_eq: &DVector<f64>,
    a_w: &DMatrix<f64>,
    r_w: &DVector<f64>,
) -> Result<EqpResult, SolverError> {
    let n = g.len();
    let me = a_eq.nrows();
    let mw = a_w.nrows();
    let dim = n + me + mw;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    if me > 0 {
        kkt.view_mut((n, 0), (me, n)).copy_from(a_eq);
        kkt.view_mut((0, n), (n, me)).copy_from(&a_eq.transpose());
    }
    if mw > 0 {
        kkt.view_mut((n + me, 0), (mw, n)).copy_from(a_w);
        kkt.view_mut((0, n + me), (n, mw)).copy_from(&a_w.transpose());
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-g));
    rhs.rows_mut(n, me).copy_from(r_eq);
    rhs.rows_mut(n + me, mw).copy_from(r_w);

    let solution = match kkt.clone().lu().solve(&rhs) {
        Some(s) => s,
        None => {
            // Singular KKT (degenerate working set): least-squares solve.
            let svd = kkt.svd(true, true);
            svd.solve(&rhs, 1e-12).map_err(|e| SolverError::Numerical(e.to_string()))?
        }
    };
    Ok(EqpResult {
        step: solution.rows(0, n).into_owned(),
        eq_multipliers: solution.rows(n, me).into_owned(),
        working_multipliers: solution.rows(n + me, mw).into_owned(),
    })
}

/// Feasible starting point: least-squares on the equalities, then (if the
/// inequalities are violated) a phase-1 QP over `(x, t)` minimizing the
/// violation bound `t`, started from a point that is feasible by
/// construction.
fn feasible_start(
    qp: &QpProblem,
    a_canon: &DMatrix<f64>,
    b_canon: &DVector<f64>,
) -> Result<DVector<f64>, SolverError> {
    let n = qp.dim();
    let x_ls = if qp.eq_matrix.nrows() > 0 {
        let svd = qp.eq_matrix.clone().svd(true, true);
        let sol = svd
            .solve(&qp.eq_vector, 1e-12)
            .map_err(|e| SolverError::Numerical(e.to_string()))?;
        let residual = (&qp.eq_matrix * &sol - &qp.eq_vector).amax();
        if residual > 1e-8 * (1.0 + qp.eq_vector.amax()) {
            return Err(SolverError::Infeasible(format!(
                "equality system inconsistent, least-squares residual {residual:.3e}"
            )));
        }
        sol
    } else {
        DVector::zeros(n)
    };

    let violation = if a_canon.nrows() > 0 {
        (a_canon * &x_ls - b_canon).amax().max(0.0)
    } else {
        0.0
    };
    if violation <= QP_FEAS_TOL {
        return Ok(x_ls);
    }

    // Phase-1 in (x, t): min t + (eps/2)(|x - x_ls|^2 + t^2)
    // s.t. A_eq x = b_eq, a_i'x - t <= b_i. Start (x_ls, violation + 1).
    let eps = 1e-6;
    let m = a_canon.nrows();
    let mut h1 = DMatrix::identity(n + 1, n + 1) * eps;
    h1[(n, n)] = eps;
    let mut g1 = DVector::zeros(n + 1);
    g1.rows_mut(0, n).copy_from(&(-eps * &x_ls));
    g1[n] = 1.0;
    let mut eq1 = DMatrix::zeros(qp.eq_matrix.nrows(), n + 1);
    eq1.view_mut((0, 0), (qp.eq_matrix.nrows(), n)).copy_from(&qp.eq_matrix);
    let mut a1 = DMatrix::zeros(m, n + 1);
    a1.view_mut((0, 0), (m, n)).copy_from(a_canon);
    for i in 0..m {
        a1[(i, n)] = -1.0;
    }
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(&x_ls);
    start[n] = violation + 1.0;

    let sol = active_set_loop(&h1, &g1, &eq1, &qp.eq_vector, &a1, b_canon, start, None)?;
    let t_star = sol.x[n];
    if t_star > 1e-7 {
        return Err(SolverError::Infeasible(format!(
            "phase-1 minimum violation {t_star:.3e} exceeds tolerance"
        )));
    }
    Ok(sol.x.rows(0, n).into_owned())
}

/// Primal active-set iteration from a feasible `x`.
#[allow(clippy::too_many_arguments)]
fn active_set_loop(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_canon: &DMatrix<f64>,
    b_canon: &DVector<f64>,
    mut x: DVector<f64>,
    initial_working: Option<Vec<usize>>,
) -> Result<QpSolution, SolverError> {
    let n = g.len();
    let m = a_canon.nrows();
    let mut working: Vec<usize> = initial_working.unwrap_or_default();
    working.retain(|&i| i < m);
    let mut eqp_solves = 0;
    let max_iterations = 60 + 12 * (n + m);

    let gather = |working: &[usize]| -> (DMatrix<f64>, DVector<f64>) {
        let mut a_w = DMatrix::zeros(working.len(), n);
        let b_w = DVector::zeros(working.len());
        for (r, &i) in working.iter().enumerate() {
            a_w.row_mut(r).copy_from(&a_canon.row(i));
        }
        (a_w, b_w)
    };

    for iteration in 1..=max_iterations {
        let grad_k = h * &x + g;
        let (a_w, zero_w) = gather(&working);
        let eqp = solve_eqp(h, &grad_k, a_eq, &DVector::zeros(b_eq.len()), &a_w, &zero_w)?;
        eqp_solves += 1;
        let p = eqp.step;

        if p.amax() <= 1e-11 * (1.0 + x.amax()) {
            // Stationary on the working set; check the multipliers.
            let negative: Vec<usize> = working
                .iter()
                .enumerate()
                .filter(|&(r, _)| eqp.working_multipliers[r] < -QP_MULT_TOL)
                .map(|(r, _)| r)
                .collect();
            if negative.is_empty() {
                // Singular-Hessian escape: a least-squares KKT solution with
                // p = 0 must still be a stationary point.
                let mut residual = &grad_k + a_eq.transpose() * &eqp.eq_multipliers;
                for (r, &i) in working.iter().enumerate() {
                    residual += eqp.working_multipliers[r] * a_canon.row(i).transpose();
                }
                if residual.amax() > 1e-6 * (1.0 + g.amax()) {
                    return Err(SolverError::Unbounded);
                }
                let mut ineq_multipliers = DVector::zeros(m);
                for (r, &i) in working.iter().enumerate() {
                    ineq_multipliers[i] = eqp.working_multipliers[r].max(0.0);
                }
                let cost = 0.5 * (h * &x).dot(&x) + g.dot(&x);
                let mut active = working.clone();
                active.sort_unstable();
                return Ok(QpSolution {
                    x,
                    eq_multipliers: eqp.eq_multipliers,
                    ineq_multipliers,
                    active_set: active,
                    iterations: iteration,
                    eqp_solves,
                    cost,
                });
            }
            // Bland-style rule: drop the lowest canonical index among the
            // negative multipliers.
            let drop_pos = *negative
                .iter()
                .min_by_key(|&&r| working[r])
                .expect("nonempty");
            working.remove(drop_pos);
            continue;
        }

        // Ratio test over rows outside the working set.
        let mut alpha = 1.0f64;
        let mut blocking: Option<usize> = None;
        let ax = a_canon * &x;
        let ap = a_canon * &p;
        for i in 0..m {
            if working.contains(&i) || ap[i] <= 1e-13 {
                continue;
            }
            let ratio = ((b_canon[i] - ax[i]) / ap[i]).max(0.0);
            // Smallest step ratio wins, ties to the lowest index; the strict
            // `<` keeps the lowest index on exact ties.
            if ratio < alpha {
                alpha = ratio;
                blocking = Some(i);
            }
        }

        // Unbounded ray: a non-trivial step with vanishing curvature, no
        // blocking row and descending gradient.
        let curvature = (h * &p).dot(&p);
        if blocking.is_none() && curvature <= 1e-12 && grad_k.dot(&p) < -1e-12 && alpha >= 1.0 {
            let probe = &x + 1e6 * &p;
            let cost_far = 0.5 * (h * &probe).dot(&probe) + g.dot(&probe);
            let cost_here = 0.5 * (h * &x).dot(&x) + g.dot(&x);
            if cost_far < cost_here - 1.0 {
                return Err(SolverError::Unbounded);
            }
        }

        x += alpha * &p;
        if let Some(i) = blocking {
            if alpha < 1.0 {
                working.push(i);
            }
        }
    }
    Err(SolverError::MaxIterations(format!("active set did not settle in {max_iterations} iterations")))
}

/// Dense primal active-set solve. With `initial_active_set` equal to the true
/// active set the solution is found in a single equality-constrained solve.
pub fn solve_qp_active_set(
    qp: &QpProblem,
    initial_active_set: Option<&[usize]>,
) -> Result<QpSolution, SolverError> {
    qp.validate()?;
    let (a_canon, b_canon) = canonical_inequalities(qp);
    let m = a_canon.nrows();

    // Direct attempt from a plain equality-constrained solve on the guessed
    // active set: one EQP, accepted if primal and dual feasible.
    if let Some(guess) = initial_active_set {
        if guess.iter().all(|&i| i < m) {
            let mut a_w = DMatrix::zeros(guess.len(), qp.dim());
            let mut b_w = DVector::zeros(guess.len());
            for (r, &i) in guess.iter().enumerate() {
                a_w.row_mut(r).copy_from(&a_canon.row(i));
                b_w[r] = b_canon[i];
            }
            let eqp = solve_eqp(&qp.hessian, &qp.gradient, &qp.eq_matrix, &qp.eq_vector, &a_w, &b_w)?;
            let x = eqp.step;
            let feasible = m == 0 || (&a_canon * &x - &b_canon).max() <= QP_FEAS_TOL;
            let dual_ok = eqp.working_multipliers.iter().all(|&l| l >= -QP_MULT_TOL);
            if feasible && dual_ok {
                let mut ineq_multipliers = DVector::zeros(m);
                for (r, &i) in guess.iter().enumerate() {
                    ineq_multipliers[i] = eqp.working_multipliers[r].max(0.0);
                }
                let cost = 0.5 * (&qp.hessian * &x).dot(&x) + qp.gradient.dot(&x);
                let mut active = guess.to_vec();
                active.sort_unstable();
                return Ok(QpSolution {
                    x,
                    eq_multipliers: eqp.eq_multipliers,
                    ineq_multipliers,
                    active_set: active,
                    iterations: 1,
                    eqp_solves: 1,
                    cost,
                });
            }
            // Otherwise continue below with the guess as initial working set,
            // after restoring feasibility.
            let x0 = feasible_start(qp, &a_canon, &b_canon)?;
            let working: Vec<usize> = guess
                .iter()
                .copied()
                .filter(|&i| (a_canon.row(i) * &x0)[(0, 0)] >= b_canon[i] - 1e-7)
                .collect();
            return active_set_loop(
                &qp.hessian,
                &qp.gradient,
                &qp.eq_matrix,
                &qp.eq_vector,
                &a_canon,
                &b_canon,
                x0,
                Some(working),
            );
        }
    }

    let x0 = feasible_start(qp, &a_canon, &b_canon)?;
    // Seed the working set with the rows active at the start.
    let working: Vec<usize> = (0..m)
        .filter(|&i| ((a_canon.row(i) * &x0)[(0, 0)] - b_canon[i]).abs() <= 1e-9)
        .collect();
    active_set_loop(
        &qp.hessian,
        &qp.gradient,
        &qp.eq_matrix,
        &qp.eq_vector,
        &a_canon,
        &b_canon,
        x0,
        Some(working),
    )
}

/// KKT residuals of a QP solution via [`kkt_residual`].
pub fn qp_kkt_report(qp: &QpProblem, solution: &QpSolution) -> KktReport {
    let (a_canon, b_canon) = canonical_inequalities(qp);
    let h = qp.hessian.clone();
    let g = qp.gradient.clone();
    let cost = move |x: &DVector<f64>| 0.5 * (&h * x).dot(x) + g.dot(x);
    let h2 = qp.hessian.clone();
    let g2 = qp.gradient.clone();
    let cost_grad = move |x: &DVector<f64>| &h2 * x + &g2;
    let ae = qp.eq_matrix.clone();
    let be = qp.eq_vector.clone();
    let eq = move |x: &DVector<f64>| &ae * x - &be;
    let ae2 = qp.eq_matrix.clone();
    let eq_jac = move |_x: &DVector<f64>| ae2.clone();
    let ac = a_canon.clone();
    let bc = b_canon.clone();
    let ineq = move |x: &DVector<f64>| &ac * x - &bc;
    let ac2 = a_canon.clone();
    let ineq_jac = move |_x: &DVector<f64>| ac2.clone();
    kkt_residual(
        &KktFunctions {
            cost: &cost,
            cost_gradient: Some(&cost_grad),
            equalities: if qp.eq_matrix.nrows() > 0 { Some(&eq) } else { None },
            eq_jacobian: Some(&eq_jac),
            inequalities: if a_canon.nrows() > 0 { Some(&ineq) } else { None },
            ineq_jacobian: Some(&ineq_jac),
        },
        &KktPoint {
            x: solution.x.clone(),
            eq_multipliers: solution.eq_multipliers.clone(),
            ineq_multipliers: solution.ineq_multipliers.clone(),
        },
    )
}

// ---------------------------------------------------------------------------
// Log-barrier Newton NLP solver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BarrierOptions {
    pub mu0: f64,
    pub mu_shrink: f64,
    pub tol: f64,
    pub feas_tol: f64,
    pub mu_min: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub trace: bool,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            mu0: 1.0,
            mu_shrink: 0.2,
            tol: 1e-6,
            feas_tol: 1e-8,
            mu_min: 5e-8,
            max_outer: 18,
            max_inner: 80,
            trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub mu: f64,
    pub cost: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

/// Solver trace CSV: `iter,mu,cost,stationarity,feasibility,complementarity`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iter,mu,cost,stationarity,feasibility,complementarity\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iter, r.mu, r.cost, r.stationarity, r.feasibility, r.complementarity
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: DVector<f64>,
    pub cost: f64,
    pub kkt: KktReport,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub trace: Vec<TraceRow>,
}

/// One-sided inequality rows of an [`NlpProblem`]: constraint uppers and
/// lowers, then variable bounds.
enum OneSided {
    ConstraintUpper(usize),
    ConstraintLower(usize),
    VarUpper(usize),
    VarLower(usize),
}

struct RowStructure {
    equality_rows: Vec<usize>,
    equality_targets: Vec<f64>,
    one_sided: Vec<OneSided>,
}

fn classify_rows(nlp: &NlpProblem) -> RowStructure {
    let (lo, hi) = nlp.constraint_bounds();
    let mut equality_rows = Vec::new();
    let mut equality_targets = Vec::new();
    let mut one_sided = Vec::new();
    for i in 0..lo.len() {
        if lo[i] == hi[i] {
            equality_rows.push(i);
            equality_targets.push(lo[i]);
        } else {
            if hi[i].is_finite() {
                one_sided.push(OneSided::ConstraintUpper(i));
            }
            if lo[i].is_finite() {
                one_sided.push(OneSided::ConstraintLower(i));
            }
        }
    }
    for j in 0..nlp.dim {
        if nlp.variable_upper[j].is_finite() {
            one_sided.push(OneSided::VarUpper(j));
        }
        if nlp.variable_lower[j].is_finite() {
            one_sided.push(OneSided::VarLower(j));
        }
    }
    RowStructure { equality_rows, equality_targets, one_sided }
}

/// Slacks `s_r = -(g_r(x))` of the one-sided rows; positive means strictly
/// feasible.
fn slacks(nlp: &NlpProblem, rows: &RowStructure, c: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let (lo, hi) = nlp.constraint_bounds();
    DVector::from_iterator(
        rows.one_sided.len(),
        rows.one_sided.iter().map(|r| match *r {
            OneSided::ConstraintUpper(i) => hi[i] - c[i],
            OneSided::ConstraintLower(i) => c[i] - lo[i],
            OneSided::VarUpper(j) => nlp.variable_upper[j] - x[j],
            OneSided::VarLower(j) => x[j] - nlp.variable_lower[j],
        }),
    )
}

/// Per-block finite-difference cost Hessian restricted to each block's
/// variable ranges (central second differences).
fn cost_hessian_fd(nlp: &NlpProblem, x: &DVector<f64>) -> DMatrix<f64> {
    let n = nlp.dim;
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for b in &nlp.cost_blocks {
        let vars: Vec<usize> = b.vars.iter().flat_map(|r| r.clone()).collect();
        let f0 = (b.eval)(x);
        // Diagonal entries.
        let mut f_plus = vec![0.0; vars.len()];
        let mut f_minus = vec![0.0; vars.len()];
        for (a, &j) in vars.iter().enumerate() {
            let h = fd_step(x[j]).sqrt() * 1e-1;
            xp[j] = x[j] + h;
            f_plus[a] = (b.eval)(&xp);
            xp[j] = x[j] - h;
            f_minus[a] = (b.eval)(&xp);
            xp[j] = x[j];
            hess[(j, j)] += (f_plus[a] - 2.0 * f0 + f_minus[a]) / (h * h);
        }
        // Off-diagonal entries.
        for (a, &j) in vars.iter().enumerate() {
            let hj = fd_step(x[j]).sqrt() * 1e-1;
            for &k in vars.iter().skip(a + 1) {
                let hk = fd_step(x[k]).sqrt() * 1e-1;
                xp[j] = x[j] + hj;
                xp[k] = x[k] + hk;
                let fpp = (b.eval)(&xp);
                xp[k] = x[k] - hk;
                let fpm = (b.eval)(&xp);
                xp[j] = x[j] - hj;
                let fmm = (b.eval)(&xp);
                xp[k] = x[k] + hk;
                let fmp = (b.eval)(&xp);
                xp[j] = x[j];
                xp[k] = x[k];
                let v = (fpp - fpm - fmp + fmm) / (4.0 * hj * hk);
                hess[(j, k)] += v;
                hess[(k, j)] += v;
            }
        }
    }
    hess
}

struct StageState {
    x: DVector<f64>,
    eq_multipliers: DVector<f64>,
    iterations: usize,
    stationarity: f64,
    eq_residual: f64,
}

/// Newton iteration on the equality-constrained barrier subproblem
/// `min f(x) - mu sum ln s_r(x)` s.t. equality rows, for one fixed `mu`.
#[allow(clippy::too_many_arguments)]
fn barrier_stage(
    nlp: &NlpProblem,
    rows: &RowStructure,
    x_start: &DVector<f64>,
    mu: f64,
    stat_target: f64,
    feas_target: f64,
    max_inner: usize,
    cost_hess: &mut dyn FnMut(&DVector<f64>) -> DMatrix<f64>,
) -> Result<StageState, SolverError> {
    let n = nlp.dim;
    let me = rows.equality_rows.len();
    let mut x = x_start.clone();
    let mut eq_multipliers = DVector::zeros(me);
    let mut merit_weight: f64 = 10.0;

    let barrier_value = |nlp: &NlpProblem, rows: &RowStructure, x: &DVector<f64>| -> Option<f64> {
        let c = nlp.constraints(x);
        let s = slacks(nlp, rows, &c, x);
        if s.iter().any(|&v| v <= 0.0) {
            return None;
        }
        Some(nlp.cost(x) - mu * s.iter().map(|v| v.ln()).sum::<f64>())
    };

    for iteration in 1..=max_inner {
        let c = nlp.constraints(&x);
        let jac = nlp.constraint_jacobian(&x);
        let s = slacks(nlp, rows, &c, &x);
        if s.iter().any(|&v| v <= 0.0) {
            return Err(SolverError::Numerical("iterate left the strictly feasible region".into()));
        }

        // Gradient and Gauss-Newton Hessian of the barrier objective.
        let mut grad = nlp.cost_gradient(&x);
        let mut hess = cost_hess(&x);
        // One-sided row gradients: from the constraint Jacobian or unit
        // vectors for variable bounds.
        let m1 = rows.one_sided.len();
        let mut g_rows = DMatrix::zeros(m1, n);
        for (r, one) in rows.one_sided.iter().enumerate() {
            match *one {
                OneSided::ConstraintUpper(i) => g_rows.row_mut(r).copy_from(&jac.row(i)),
                OneSided::ConstraintLower(i) => g_rows.row_mut(r).copy_from(&(-jac.row(i))),
                OneSided::VarUpper(j) => g_rows[(r, j)] = 1.0,
                OneSided::VarLower(j) => g_rows[(r, j)] = -1.0,
            }
        }
        let weights = DVector::from_iterator(m1, s.iter().map(|&v| mu / v));
        grad += g_rows.transpose() * &weights;
        let curv = DMatrix::from_diagonal(&DVector::from_iterator(m1, s.iter().map(|&v| mu / (v * v))));
        hess += g_rows.transpose() * curv * &g_rows;

        // Equality residual and Jacobian.
        let mut he = DVector::zeros(me);
        let mut je = DMatrix::zeros(me, n);
        for (r, &i) in rows.equality_rows.iter().enumerate() {
            he[r] = c[i] - rows.equality_targets[r];
            je.row_mut(r).copy_from(&jac.row(i));
        }

        // Convergence check with multipliers from the previous solve.
        let stationarity = (&grad + je.transpose() * &eq_multipliers).amax();
        let eq_residual = if me > 0 { he.amax() } else { 0.0 };
        if stationarity <= stat_target && eq_residual <= feas_target {
            return Ok(StageState { x, eq_multipliers, iterations: iteration - 1, stationarity, eq_residual });
        }

        // Newton KKT system with progressive regularization.
        let mut delta = 1e-10 * (1.0 + hess.diagonal().amax());
        let (dx, lambda) = loop {
            let dim = n + me;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&(&hess + DMatrix::identity(n, n) * delta));
            if me > 0 {
                kkt.view_mut((n, 0), (me, n)).copy_from(&je);
                kkt.view_mut((0, n), (n, me)).copy_from(&je.transpose());
                for r in 0..me {
                    kkt[(n + r, n + r)] = -1e-12;
                }
            }
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&(-&grad));
            rhs.rows_mut(n, me).copy_from(&(-&he));
            match kkt.lu().solve(&rhs) {
                Some(sol) => break (sol.rows(0, n).into_owned(), sol.rows(n, me).into_owned()),
                None => {
                    delta = (delta * 100.0).max(1e-8);
                    if delta > 1e4 {
                        return Err(SolverError::Numerical("singular Newton KKT system".into()));
                    }
                }
            }
        };

        eq_multipliers = lambda.clone();
        merit_weight = merit_weight.max(2.0 * lambda.amax());

        // Backtracking line search on the merit function
        // phi + w |he|_1, keeping slacks strictly positive.
        let merit0 = barrier_value(nlp, rows, &x)
            .ok_or_else(|| SolverError::Numerical("merit undefined at iterate".into()))?
            + merit_weight * he.abs().sum();
        let descent = grad.dot(&dx) - merit_weight * he.abs().sum();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let x_try = &x + alpha * &dx;
            let c_try = nlp.constraints(&x_try);
            let s_try = slacks(nlp, rows, &c_try, &x_try);
            if s_try.iter().zip(s.iter()).all(|(&st, &s0)| st > 0.005 * s0.min(1.0) && st > 0.0) {
                if let Some(phi_try) = barrier_value(nlp, rows, &x_try) {
                    let mut he_try_sum = 0.0;
                    for (r, &i) in rows.equality_rows.iter().enumerate() {
                        he_try_sum += (c_try[i] - rows.equality_targets[r]).abs();
                    }
                    let merit_try = phi_try + merit_weight * he_try_sum;
                    if merit_try <= merit0 + 1e-4 * alpha * descent.min(0.0) || merit_try < merit0 {
                        x = x_try;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No merit progress: accept the smallest safeguarded step if it
            // keeps slacks positive, otherwise report failure.
            let x_try = &x + (alpha * 2.0) * &dx;
            let c_try = nlp.constraints(&x_try);
            let s_try = slacks(nlp, rows, &c_try, &x_try);
            if s_try.iter().all(|&v| v > 0.0) {
                x = x_try;
            } else {
                return Err(SolverError::MaxIterations(
                    "inner line search stalled against the barrier".into(),
                ));
            }
        }
    }

    // Report the last residuals on exit.
    let c = nlp.constraints(&x);
    let mut eq_residual: f64 = 0.0;
    for (r, &i) in rows.equality_rows.iter().enumerate() {
        eq_residual = eq_residual.max((c[i] - rows.equality_targets[r]).abs());
    }
    Err(SolverError::MaxIterations(format!(
        "barrier stage at mu={mu:.3e} not converged, equality residual {eq_residual:.3e}"
    )))
}

/// Central-path point of the barrier subproblem at a fixed `mu`; exposed for
/// path diagnostics and tests.
pub fn solve_barrier_subproblem(
    nlp: &NlpProblem,
    x_start: &DVector<f64>,
    mu: f64,
    opts: &BarrierOptions,
) -> Result<DVector<f64>, SolverError> {
    let rows = classify_rows(nlp);
    let mut hess_fn = |x: &DVector<f64>| cost_hessian_fd(nlp, x);
    let stage = barrier_stage(
        nlp,
        &rows,
        x_start,
        mu,
        (1e-9 / mu).clamp(1e-12, 1e-8),
        opts.feas_tol,
        opts.max_inner,
        &mut hess_fn,
    )?;
    Ok(stage.x)
}

/// Interior-point solve: shrinks `mu` geometrically from `mu0`, running a
/// damped Newton iteration on the equality-constrained barrier subproblem at
/// each stage. Requires a strictly feasible start w.r.t. the one-sided rows;
/// otherwise a slack-relaxed phase-1 is attempted first.
pub fn solve_nlp_barrier(nlp: &NlpProblem, opts: &BarrierOptions) -> Result<NlpSolution, SolverError> {
    let rows = classify_rows(nlp);
    let mut x = nlp.initial_guess.clone();

    // Strict feasibility of the start.
    let c0 = nlp.constraints(&x);
    let s0 = slacks(nlp, &rows, &c0, &x);
    if s0.iter().any(|&v| v <= 0.0) {
        x = phase_one(nlp, &rows, &x, opts)?;
    }

    let mut trace = Vec::new();
    let mut total_inner = 0;
    let mut outer = 0;
    let mut mu = opts.mu0;
    let mut eq_multipliers: Option<DVector<f64>> = None;
    let mut hess_fn = |xv: &DVector<f64>| cost_hessian_fd(nlp, xv);

    loop {
        outer += 1;
        let last_stage = mu * opts.mu_shrink < opts.mu_min;
        let stat_target = if last_stage { opts.tol } else { (10.0 * mu).max(opts.tol) };
        let feas_target = if last_stage { opts.feas_tol } else { opts.feas_tol.max(0.01 * mu) };
        let stage = barrier_stage(nlp, &rows, &x, mu, stat_target, feas_target, opts.max_inner, &mut hess_fn)?;
        x = stage.x;
        eq_multipliers = Some(stage.eq_multipliers);
        total_inner += stage.iterations;
        if opts.trace {
            trace.push(TraceRow {
                iter: total_inner,
                mu,
                cost: nlp.cost(&x),
                stationarity: stage.stationarity,
                feasibility: stage.eq_residual,
                complementarity: mu,
            });
        }
        if last_stage || outer >= opts.max_outer {
            break;
        }
        mu *= opts.mu_shrink;
    }

    // Multipliers: lambda_r = mu / s_r for one-sided rows.
    let c = nlp.constraints(&x);
    let s = slacks(nlp, &rows, &c, &x);
    let lambda_ineq = DVector::from_iterator(s.len(), s.iter().map(|&v| mu / v));
    let eq_multipliers = eq_multipliers.unwrap_or_else(|| DVector::zeros(rows.equality_rows.len()));
    let kkt = nlp_kkt_report(nlp, &rows, &x, &eq_multipliers, &lambda_ineq);
    Ok(NlpSolution {
        cost: nlp.cost(&x),
        x,
        kkt,
        iterations: total_inner,
        outer_iterations: outer,
        trace,
    })
}

/// Slack-relaxed phase-1: Gauss-Newton descent on the squared violations
/// of the one-sided rows (relaxed by a small interior margin) plus the
/// equality residuals, until a strictly feasible point appears.
fn phase_one(
    nlp: &NlpProblem,
    rows: &RowStructure,
    x0: &DVector<f64>,
    _opts: &BarrierOptions,
) -> Result<DVector<f64>, SolverError> {
    let n = nlp.dim;
    let margin = 1e-6;
    let mut x = x0.clone();

    let violation = |nlp: &NlpProblem, rows: &RowStructure, x: &DVector<f64>| -> (DVector<f64>, f64) {
        let c = nlp.constraints(x);
        let s = slacks(nlp, rows, &c, x);
        let mut worst: f64 = 0.0;
        for &v in s.iter() {
            worst = worst.max(margin - v);
        }
        (s, worst)
    };

    for _ in 0..200 {
        let (s, worst) = violation(nlp, rows, &x);
        if worst <= 0.9 * margin {
            return Ok(x);
        }
        let jac = nlp.constraint_jacobian(&x);
        // Residual vector r: active violations (margin - s_r) and equality
        // defects; Gauss-Newton step on 1/2 |r|^2.
        let mut grad = DVector::zeros(n);
        let mut gn = DMatrix::identity(n, n) * 1e-8;
        for (r, one) in rows.one_sided.iter().enumerate() {
            let v = margin - s[r];
            if v <= 0.0 {
                continue;
            }
            // gradient of -s_r w.r.t x
            let mut row = DVector::zeros(n);
            match *one {
                OneSided::ConstraintUpper(i) => row.copy_from(&jac.row(i).transpose()),
                OneSided::ConstraintLower(i) => row.copy_from(&(-jac.row(i).transpose())),
                OneSided::VarUpper(j) => row[j] = 1.0,
                OneSided::VarLower(j) => row[j] = -1.0,
            }
            grad += v * &row;
            gn += &row * row.transpose();
        }
        let c = nlp.constraints(&x);
        for (r, &i) in rows.equality_rows.iter().enumerate() {
            let v = c[i] - rows.equality_targets[r];
            let row = jac.row(i).transpose();
            grad += v * &row;
            gn += &row * row.transpose();
        }
        let step = gn
            .lu()
            .solve(&(-&grad))
            .ok_or_else(|| SolverError::Numerical("phase-1 Gauss-Newton system singular".into()))?;
        // Backtrack on the worst violation.
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let x_try = &x + alpha * &step;
            let (_, w_try) = violation(nlp, rows, &x_try);
            if w_try < worst {
                x = x_try;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let (_, worst) = violation(nlp, rows, &x);
    if worst < margin {
        Ok(x)
    } else {
        Err(SolverError::Infeasible(format!(
            "phase-1 stalled with worst interior defect {worst:.3e}"
        )))
    }
}

/// True KKT residuals of an NLP point with the barrier's multiplier
/// estimates.
fn nlp_kkt_report(
    nlp: &NlpProblem,
    rows: &RowStructure,
    x: &DVector<f64>,
    eq_multipliers: &DVector<f64>,
    ineq_multipliers: &DVector<f64>,
) -> KktReport {
    let c = nlp.constraints(x);
    let jac = nlp.constraint_jacobian(x);
    let s = slacks(nlp, rows, &c, x);
    let mut grad = nlp.cost_gradient(x);
    let mut primal_ineq: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for (r, one) in rows.one_sided.iter().enumerate() {
        primal_ineq = primal_ineq.max(-s[r].min(0.0));
        complementarity = complementarity.max((ineq_multipliers[r] * s[r]).abs());
        let lambda = ineq_multipliers[r];
        match *one {
            OneSided::ConstraintUpper(i) => grad += lambda * jac.row(i).transpose(),
            OneSided::ConstraintLower(i) => grad -= lambda * jac.row(i).transpose(),
            OneSided::VarUpper(j) => grad[j] += lambda,
            OneSided::VarLower(j) => grad[j] -= lambda,
        }
    }
    let mut primal_eq: f64 = 0.0;
    for (r, &i) in rows.equality_rows.iter().enumerate() {
        primal_eq = primal_eq.max((c[i] - rows.equality_targets[r]).abs());
        grad += eq_multipliers[r] * jac.row(i).transpose();
    }
    KktReport {
        stationarity: grad.amax(),
        primal_eq,
        primal_ineq,
        dual_feasibility: ineq_multipliers.iter().fold(0.0f64, |acc, &l| acc.max(-l.min(0.0))),
        complementarity,
    }
}

// ---------------------------------------------------------------------------
// LQR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum LqrMode {
    /// Backward integration of the Riccati differential equation from the
    /// terminal value matrix.
    FiniteHorizon { terminal: DMatrix<f64>, horizon: f64, dt: f64 },
    /// Stationary solution of the algebraic Riccati equation.
    InfiniteHorizon,
}

#[derive(Debug, Clone)]
pub enum LqrSolution {
    FiniteHorizon {
        /// Ascending times over `[0, T]`.
        times: Vec<f64>,
        /// Value matrices `P(t)` on the grid.
        values: Vec<DMatrix<f64>>,
        /// Gain schedule `K(t) = R^-1 B' P(t)`.
        gains: Vec<DMatrix<f64>>,
    },
    InfiniteHorizon {
        value: DMatrix<f64>,
        gain: DMatrix<f64>,
        are_residual: f64,
        iterations: usize,
    },
}

fn riccati_rate(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    b_rinv_bt: &DMatrix<f64>,
) -> DMatrix<f64> {
    // dP/dt = -Q + P B R^-1 B' P - P A - A' P
    -q + p * b_rinv_bt * p - p * a - a.transpose() * p
}

fn check_lqr_inputs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SolverError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(SolverError::Invalid("LQR matrix shapes".into()));
    }
    if r.nrows() != b.ncols() || r.ncols() != b.ncols() {
        return Err(SolverError::Invalid("R must be m x m".into()));
    }
    if q.symmetric_eigenvalues().iter().any(|&e| e < -1e-9) {
        return Err(SolverError::Invalid("Q must be positive semidefinite".into()));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| SolverError::Invalid("R must be positive definite".into()))?;
    Ok(r_chol.solve(&b.transpose()))
}

/// Solves the continuous-time LQR problem in either mode.
pub fn solve_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    mode: LqrMode,
) -> Result<LqrSolution, SolverError> {
    let rinv_bt = check_lqr_inputs(a, b, q, r)?;
    let b_rinv_bt = b * &rinv_bt;
    match mode {
        LqrMode::FiniteHorizon { terminal, horizon, dt } => {
            if terminal.symmetric_eigenvalues().iter().any(|&e| e < -1e-9) {
                return Err(SolverError::Invalid("terminal matrix must be PSD".into()));
            }
            if dt <= 0.0 || horizon <= 0.0 {
                return Err(SolverError::Invalid("horizon and dt must be positive".into()));
            }
            let steps = (horizon / dt).round().max(1.0) as usize;
            let dt = horizon / steps as f64;
            // Integrate backwards with RK4 in tau = T - t.
            let mut p = terminal.clone();
            let mut values = vec![p.clone()];
            for _ in 0..steps {
                let k1 = -riccati_rate(&p, a, q, &b_rinv_bt);
                let k2 = -riccati_rate(&(&p + 0.5 * dt * &k1), a, q, &b_rinv_bt);
                let k3 = -riccati_rate(&(&p + 0.5 * dt * &k2), a, q, &b_rinv_bt);
                let k4 = -riccati_rate(&(&p + dt * &k3), a, q, &b_rinv_bt);
                p += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                p = 0.5 * (&p + p.transpose());
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(SolverError::Numerical("Riccati integration diverged".into()));
                }
                values.push(p.clone());
            }
            // values currently run from t = T back to t = 0; flip ascending.
            values.reverse();
            let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
            let gains: Vec<DMatrix<f64>> = values.iter().map(|p| &rinv_bt * p).collect();
            Ok(LqrSolution::FiniteHorizon { times, values, gains })
        }
        LqrMode::InfiniteHorizon => {
            let n = a.nrows();
            // Seed by integrating the Riccati flow until it settles, then
            // polish with the Kleinman-Newton iteration.
            let scale = a.amax().max(b_rinv_bt.amax()).max(q.amax()).max(1.0);
            let dt = 0.02 / scale;
            let mut p = q.clone() + DMatrix::identity(n, n) * 1e-6;
            let mut settled = false;
            for _ in 0..200_000 {
                let rate = riccati_rate(&p, a, q, &b_rinv_bt);
                p -= dt * &rate;
                p = 0.5 * (&p + p.transpose());
                if !p.iter().all(|v| v.is_finite()) || p.amax() > 1e14 {
                    return Err(SolverError::Numerical(
                        "Riccati flow diverged; the pair may be unstabilizable".into(),
                    ));
                }
                if rate.amax() < 1e-4 * (1.0 + p.amax()) {
                    settled = true;
                    break;
                }
            }
            if !settled {
                return Err(SolverError::MaxIterations("Riccati flow did not settle".into()));
            }

            let mut iterations = 0;
            let mut residual = f64::INFINITY;
            for _ in 0..60 {
                iterations += 1;
                let k = &rinv_bt * &p;
                let ac = a - b * &k;
                let m = q + k.transpose() * r * &k;
                p = solve_lyapunov(&ac.transpose(), &(-&m))?;
                p = 0.5 * (&p + p.transpose());
                residual = (-q + &p * &b_rinv_bt * &p - &p * a - a.transpose() * &p).amax();
                if !residual.is_finite() {
                    return Err(SolverError::Numerical("Kleinman iteration diverged".into()));
                }
                if residual < 1e-10 {
                    break;
                }
            }
            if residual > 1e-8 {
                return Err(SolverError::MaxIterations(format!(
                    "ARE residual {residual:.3e} after {iterations} Kleinman iterations"
                )));
            }
            let gain = &rinv_bt * &p;
            Ok(LqrSolution::InfiniteHorizon { value: p, gain, are_residual: residual, iterations })
        }
    }
}

/// Solves `M' X + X M = C` for symmetric right-hand sides via the Kronecker
/// identity `(I (x) M' + M' (x) I) vec(X) = vec(C)`.
fn solve_lyapunov(m_t: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, SolverError> {
    let n = m_t.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let big = eye.kronecker(m_t) + m_t.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, c.iter().copied());
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SolverError::Numerical("singular Lyapunov operator".into()))?;
    Ok(DMatrix::from_iterator(n, n, sol.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{CostBlock, ConstraintBlock};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    // ---- KKT ----

    #[test]
    fn kkt_unconstrained_minimum_is_clean() {
        let cost = |x: &DVector<f64>| 0.5 * x.norm_squared();
        let point = KktPoint {
            x: DVector::zeros(1),
            eq_multipliers: DVector::zeros(0),
            ineq_multipliers: DVector::zeros(0),
        };
        let report = kkt_residual(
            &KktFunctions {
                cost: &cost,
                cost_gradient: None,
                equalities: None,
                eq_jacobian: None,
                inequalities: None,
                ineq_jacobian: None,
            },
            &point,
        );
        assert!(report.worst() < 1e-10);
    }

    #[test]
    fn kkt_half_space_hand_solution() {
        // min 1/2 x^2 s.t. x >= 1: optimum x = 1, lambda = 1.
        let cost = |x: &DVector<f64>| 0.5 * x[0] * x[0];
        let ineq = |x: &DVector<f64>| DVector::from_vec(vec![1.0 - x[0]]);
        let mk = |lambda: f64| KktPoint {
            x: DVector::from_vec(vec![1.0]),
            eq_multipliers: DVector::zeros(0),
            ineq_multipliers: DVector::from_vec(vec![lambda]),
        };
        let funcs = KktFunctions {
            cost: &cost,
            cost_gradient: None,
            equalities: None,
            eq_jacobian: None,
            inequalities: Some(&ineq),
            ineq_jacobian: None,
        };
        let good = kkt_residual(&funcs, &mk(1.0));
        assert!(good.worst() < 1e-9, "residuals: {good:?}");

        // Same point with lambda = 0: stationarity is exactly the gradient.
        let bad = kkt_residual(&funcs, &mk(0.0));
        assert_relative_eq!(bad.stationarity, 1.0, epsilon = 1e-9);
        assert!(bad.primal_eq == 0.0 && bad.primal_ineq == 0.0 && bad.complementarity == 0.0);
    }

    // ---- QP ----

    #[test]
    fn qp_unconstrained_solution() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_vec(vec![-2.0, -8.0]);
        let qp = QpProblem::new(h.clone(), g.clone());
        let sol = solve_qp_active_set(&qp, None).unwrap();
        let expected = -h.try_inverse().unwrap() * g;
        assert!((sol.x - expected).amax() < 1e-10);
    }

    #[test]
    fn qp_hand_kkt_example() {
        // min 1/2 (x^2 + y^2) s.t. x + y >= 2 -> x = y = 1, lambda = 1.
        let mut qp = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2));
        qp.ineq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        qp.ineq_lower = DVector::from_vec(vec![2.0]);
        qp.ineq_upper = DVector::from_vec(vec![f64::INFINITY]);
        let sol = solve_qp_active_set(&qp, None).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && (sol.x[1] - 1.0).abs() < 1e-9);
        assert!((sol.ineq_multipliers[0] - 1.0).abs() < 1e-9);
        let report = qp_kkt_report(&qp, &sol);
        assert!(report.worst() < 1e-8, "{report:?}");
    }

    #[test]
    fn qp_correct_active_set_guess_single_solve() {
        let mut qp = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2));
        qp.ineq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        qp.ineq_lower = DVector::from_vec(vec![2.0]);
        qp.ineq_upper = DVector::from_vec(vec![f64::INFINITY]);
        // Canonical rows: only the lower bound -> row 0 is -(x+y) <= -2.
        let sol = solve_qp_active_set(&qp, Some(&[0])).unwrap();
        assert_eq!(sol.eqp_solves, 1);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn qp_detects_infeasible_and_unbounded() {
        // x <= -1 and x >= 1 cannot hold together.
        let mut qp = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1));
        qp.var_lower = DVector::from_vec(vec![1.0]);
        qp.var_upper = DVector::from_vec(vec![-1.0]);
        assert!(matches!(solve_qp_active_set(&qp, None), Err(SolverError::Infeasible(_))));

        // min x with no curvature and no lower bound.
        let qp = QpProblem::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0]));
        assert!(matches!(solve_qp_active_set(&qp, None), Err(SolverError::Unbounded)));
    }

    /// Brute-force oracle: enumerate all active subsets of the canonical
    /// rows, solve each equality-constrained system, filter by feasibility
    /// and multiplier sign, keep the best cost.
    pub(crate) fn qp_brute_force(qp: &QpProblem) -> Option<(DVector<f64>, f64)> {
        let (a_canon, b_canon) = canonical_inequalities(qp);
        let m = a_canon.nrows();
        let n = qp.dim();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for mask in 0..(1u32 << m) {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if rows.len() > n {
                continue;
            }
            let mut a_w = DMatrix::zeros(rows.len(), n);
            let mut b_w = DVector::zeros(rows.len());
            for (r, &i) in rows.iter().enumerate() {
                a_w.row_mut(r).copy_from(&a_canon.row(i));
                b_w[r] = b_canon[i];
            }
            let Ok(eqp) = solve_eqp(&qp.hessian, &qp.gradient, &qp.eq_matrix, &qp.eq_vector, &a_w, &b_w)
            else {
                continue;
            };
            let x = eqp.step;
            if !x.iter().all(|v| v.is_finite()) {
                continue;
            }
            // The candidate must reproduce its working rows (guards against
            // least-squares solutions of inconsistent subsets).
            if rows.len() > 0 && (&a_w * &x - &b_w).amax() > 1e-7 {
                continue;
            }
            if m > 0 && (&a_canon * &x - &b_canon).max() > 1e-7 {
                continue;
            }
            if eqp.working_multipliers.iter().any(|&l| l < -1e-7) {
                continue;
            }
            let cost = 0.5 * (&qp.hessian * &x).dot(&x) + qp.gradient.dot(&x);
            match &best {
                Some((_, c)) if *c <= cost => {}
                _ => best = Some((x, cost)),
            }
        }
        best
    }

    #[test]
    fn qp_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut solved = 0;
        for _ in 0..120 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(0..=6);
            let l = DMatrix::from_fn(n, n, |i, j| if i >= j { rng.gen_range(-1.0..1.0) } else { 0.0 });
            let mut h = &l * l.transpose();
            for d in 0..n {
                h[(d, d)] += 0.3;
            }
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let mut qp = QpProblem::new(h, g);
            qp.ineq_matrix = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            qp.ineq_lower = DVector::from_element(m, f64::NEG_INFINITY);
            qp.ineq_upper = DVector::from_fn(m, |_, _| rng.gen_range(0.2..1.5));

            let brute = qp_brute_force(&qp);
            match solve_qp_active_set(&qp, None) {
                Ok(sol) => {
                    let (bx, bcost) = brute.expect("solver succeeded but oracle found nothing");
                    assert!(
                        (sol.cost - bcost).abs() < 1e-6 || (&sol.x - &bx).amax() < 1e-6,
                        "cost {} vs oracle {}",
                        sol.cost,
                        bcost
                    );
                    let report = qp_kkt_report(&qp, &sol);
                    assert!(report.worst() < 1e-8, "KKT report {report:?}");
                    assert!(sol.ineq_multipliers.iter().all(|&l| l >= -1e-10));
                    solved += 1;
                }
                Err(SolverError::Infeasible(_)) => assert!(brute.is_none()),
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(solved >= 100, "only {solved} solvable instances");
    }

    // ---- Barrier ----

    fn quadratic_nlp(h: &DMatrix<f64>, g: &DVector<f64>) -> NlpProblem {
        let n = g.len();
        let h = h.clone();
        let g = g.clone();
        let h2 = h.clone();
        let g2 = g.clone();
        NlpProblem {
            dim: n,
            cost_blocks: vec![CostBlock {
                vars: vec![0..n],
                eval: Box::new(move |x: &DVector<f64>| 0.5 * (&h * x).dot(x) + g.dot(x)),
                gradient: Some(Box::new(move |x: &DVector<f64>, out: &mut DVector<f64>| {
                    *out += &h2 * x + &g2;
                })),
            }],
            constraint_blocks: vec![],
            variable_lower: DVector::from_element(n, f64::NEG_INFINITY),
            variable_upper: DVector::from_element(n, f64::INFINITY),
            initial_guess: DVector::zeros(n),
        }
    }

    #[test]
    fn barrier_equality_only_solves_in_one_stage() {
        // min 1/2|x|^2 s.t. x0 + x1 = 2 -> x = (1, 1).
        let mut nlp = quadratic_nlp(&DMatrix::identity(2, 2), &DVector::zeros(2));
        nlp.constraint_blocks.push(ConstraintBlock {
            dim: 1,
            vars: vec![0..2],
            eval: Box::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0] + x[1]])),
            lower: DVector::from_vec(vec![2.0]),
            upper: DVector::from_vec(vec![2.0]),
            label: "sum".into(),
        });
        let sol = solve_nlp_barrier(&nlp, &BarrierOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-8 && (sol.x[1] - 1.0).abs() < 1e-8);
        assert!(sol.kkt.worst() < 1e-6);
    }

    #[test]
    fn barrier_path_is_mu_on_half_line() {
        // min x s.t. x >= 0: the central path is x(mu) = mu.
        let mut nlp = quadratic_nlp(&DMatrix::zeros(1, 1), &DVector::from_vec(vec![1.0]));
        nlp.variable_lower = DVector::from_vec(vec![0.0]);
        nlp.initial_guess = DVector::from_vec(vec![1.0]);
        let opts = BarrierOptions::default();
        for mu in [1.0, 0.2, 0.04, 0.008] {
            let x_mu = solve_barrier_subproblem(&nlp, &nlp.initial_guess, mu, &opts).unwrap();
            assert!(
                (x_mu[0] - mu).abs() < 1e-8,
                "x({mu}) = {} off the central path",
                x_mu[0]
            );
        }
        let sol = solve_nlp_barrier(&nlp, &opts).unwrap();
        assert!(sol.x[0] >= 0.0 && sol.x[0] < 1e-6);
    }

    #[test]
    fn barrier_matches_active_set_on_random_qps() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut costs = Vec::new();
        for _ in 0..25 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=4);
            let l = DMatrix::from_fn(n, n, |i, j| if i >= j { rng.gen_range(-1.0..1.0) } else { 0.0 });
            let mut h = &l * l.transpose();
            for d in 0..n {
                h[(d, d)] += 0.5;
            }
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(m, |_, _| rng.gen_range(0.3..1.5));

            let mut qp = QpProblem::new(h.clone(), g.clone());
            qp.ineq_matrix = a.clone();
            qp.ineq_lower = DVector::from_element(m, f64::NEG_INFINITY);
            qp.ineq_upper = b.clone();
            let as_sol = solve_qp_active_set(&qp, None).unwrap();

            let mut nlp = quadratic_nlp(&h, &g);
            nlp.constraint_blocks.push(ConstraintBlock {
                dim: m,
                vars: vec![0..n],
                eval: Box::new(move |x: &DVector<f64>| &a * x),
                lower: DVector::from_element(m, f64::NEG_INFINITY),
                upper: b,
                label: "rows".into(),
            });
            // x = 0 is strictly feasible (b > 0).
            let barrier_sol = solve_nlp_barrier(&nlp, &BarrierOptions::default()).unwrap();
            let gap = (&barrier_sol.x - &as_sol.x).amax();
            assert!(gap < 1e-4, "barrier/active-set gap {gap}");
            costs.push(gap);
        }
        assert_eq!(costs.len(), 25);
    }

    #[test]
    fn barrier_central_path_cost_monotone() {
        // Convex instance: cost along the central path is non-increasing as
        // mu decreases.
        let mut nlp = quadratic_nlp(&DMatrix::identity(2, 2), &DVector::from_vec(vec![-3.0, -1.0]));
        nlp.variable_lower = DVector::from_vec(vec![0.0, 0.0]);
        nlp.variable_upper = DVector::from_vec(vec![1.0, 1.0]);
        nlp.initial_guess = DVector::from_vec(vec![0.5, 0.5]);
        let opts = BarrierOptions::default();
        let mut previous = f64::INFINITY;
        let mut x = nlp.initial_guess.clone();
        for k in 0..6 {
            let mu = 1.0 * 0.2f64.powi(k);
            x = solve_barrier_subproblem(&nlp, &x, mu, &opts).unwrap();
            let cost = nlp.cost(&x);
            assert!(cost <= previous + 1e-9, "cost increased along the path");
            previous = cost;
        }
    }

    #[test]
    fn barrier_phase_one_recovers_interior() {
        // Start outside x >= 1.
        let mut nlp = quadratic_nlp(&DMatrix::identity(1, 1), &DVector::zeros(1));
        nlp.variable_lower = DVector::from_vec(vec![1.0]);
        nlp.initial_guess = DVector::from_vec(vec![-3.0]);
        let sol = solve_nlp_barrier(&nlp, &BarrierOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-4, "x = {}", sol.x[0]);
    }

    // ---- LQR ----

    #[test]
    fn lqr_scalar_analytic() {
        // A=0, B=1, Q=1, R=1: ARE gives P^2 = 1 -> P = 1, K = 1.
        let a = DMatrix::zeros(1, 1);
        let b = DMatrix::identity(1, 1);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        match solve_lqr(&a, &b, &q, &r, LqrMode::InfiniteHorizon).unwrap() {
            LqrSolution::InfiniteHorizon { value, gain, are_residual, .. } => {
                assert!((value[(0, 0)] - 1.0).abs() < 1e-10);
                assert!((gain[(0, 0)] - 1.0).abs() < 1e-10);
                assert!(are_residual < 1e-8);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lqr_zero_cost_gives_zero_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::zeros(2, 2);
        let r = DMatrix::identity(1, 1);
        match solve_lqr(&a, &b, &q, &r, LqrMode::FiniteHorizon { terminal: DMatrix::zeros(2, 2), horizon: 1.0, dt: 0.01 })
            .unwrap()
        {
            LqrSolution::FiniteHorizon { values, gains, .. } => {
                for (p, k) in values.iter().zip(&gains) {
                    assert!(p.amax() < 1e-12 && k.amax() < 1e-12);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lqr_double_integrator_closed_loop_stable() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        match solve_lqr(&a, &b, &q, &r, LqrMode::InfiniteHorizon).unwrap() {
            LqrSolution::InfiniteHorizon { gain, are_residual, .. } => {
                assert!(are_residual < 1e-8);
                let ac = &a - &b * &gain;
                for eig in ac.complex_eigenvalues().iter() {
                    assert!(eig.re < -1e-6, "closed-loop eigenvalue {eig} not in the left half plane");
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lqr_finite_horizon_converges_to_infinite_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.5, 0.1]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let (k_bar, slowest) = match solve_lqr(&a, &b, &q, &r, LqrMode::InfiniteHorizon).unwrap() {
            LqrSolution::InfiniteHorizon { gain, .. } => {
                let ac = &a - &b * &gain;
                let slowest = ac
                    .complex_eigenvalues()
                    .iter()
                    .map(|e| e.re.abs())
                    .fold(f64::INFINITY, f64::min);
                (gain, slowest)
            }
            _ => unreachable!(),
        };
        let horizon = 20.0 / slowest;
        match solve_lqr(
            &a,
            &b,
            &q,
            &r,
            LqrMode::FiniteHorizon { terminal: DMatrix::zeros(2, 2), horizon, dt: 0.002 },
        )
        .unwrap()
        {
            LqrSolution::FiniteHorizon { gains, .. } => {
                assert!((gains.first().unwrap() - &k_bar).amax() < 1e-4);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lqr_rejects_uncontrollable_unstable_pair() {
        // Unstable mode with no control authority.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert!(solve_lqr(&a, &b, &q, &r, LqrMode::InfiniteHorizon).is_err());
    }
}
