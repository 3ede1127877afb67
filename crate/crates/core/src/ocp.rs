//! Continuous optimal-control problems, multiple-shooting transcription to a
//! finite-dimensional program, and the receding-horizon execution loop.
//!
//! Transcribed problems keep a block structure: the cost is a sum of blocks
//! and the constraints a stack of blocks, each reading a few variable ranges.
//! Solvers use the ranges to skip finite-difference probes.

use crate::integrators::{self, ButcherTableau, Trajectory};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use std::ops::Range;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("integration failed: {0}")]
    Integration(#[from] integrators::IntegratorError),
    #[error("subproblem infeasible at step {step}: {detail}")]
    Infeasible { step: usize, detail: String },
    #[error("solver failed at step {step}: {detail}")]
    SolverFailure { step: usize, detail: String },
}

pub type Dynamics = Rc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64>>;
pub type StageCost = Rc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64>;
pub type TerminalCost = Rc<dyn Fn(&DVector<f64>) -> f64>;
pub type PathFunction = Rc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64>>;

/// Path constraint `lower <= g(x, u, t) <= upper`, enforced at the shooting
/// nodes.
#[derive(Clone)]
pub struct PathConstraint {
    pub dim: usize,
    pub eval: PathFunction,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Continuous optimal-control problem on a fixed horizon.
#[derive(Clone)]
pub struct OcpProblem {
    pub state_dim: usize,
    pub control_dim: usize,
    pub dynamics: Dynamics,
    pub lagrange: Option<StageCost>,
    pub mayer: Option<TerminalCost>,
    pub path: Option<PathConstraint>,
    pub control_lower: DVector<f64>,
    pub control_upper: DVector<f64>,
    pub t0: f64,
    pub t_final: f64,
}

impl OcpProblem {
    pub fn new(state_dim: usize, control_dim: usize, dynamics: Dynamics, t0: f64, t_final: f64) -> Self {
        OcpProblem {
            state_dim,
            control_dim,
            dynamics,
            lagrange: None,
            mayer: None,
            path: None,
            control_lower: DVector::from_element(control_dim, f64::NEG_INFINITY),
            control_upper: DVector::from_element(control_dim, f64::INFINITY),
            t0,
            t_final,
        }
    }
}

/// Index map for the interleaved stacking `(u_0, x_1, u_1, x_2, ..., u_{N-1}, x_N)`.
/// The initial state is data, not a variable.
#[derive(Debug, Clone)]
pub struct VariableLayout {
    pub state_dim: usize,
    pub control_dim: usize,
    pub intervals: usize,
}

impl VariableLayout {
    pub fn dim(&self) -> usize {
        self.intervals * (self.state_dim + self.control_dim)
    }

    /// Variable range of `u_k`, `k` in `0..N`.
    pub fn control(&self, k: usize) -> Range<usize> {
        assert!(k < self.intervals);
        let start = k * (self.state_dim + self.control_dim);
        start..start + self.control_dim
    }

    /// Variable range of `x_k`, `k` in `1..=N`.
    pub fn state(&self, k: usize) -> Range<usize> {
        assert!(k >= 1 && k <= self.intervals);
        let start = (k - 1) * (self.state_dim + self.control_dim) + self.control_dim;
        start..start + self.state_dim
    }

    pub fn extract_controls(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.intervals)
            .map(|k| x.rows(self.control(k).start, self.control_dim).into_owned())
            .collect()
    }

    pub fn extract_states(&self, x0: &DVector<f64>, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut states = vec![x0.clone()];
        for k in 1..=self.intervals {
            states.push(x.rows(self.state(k).start, self.state_dim).into_owned());
        }
        states
    }
}

/// One additive cost term reading a few variable ranges.
pub struct CostBlock {
    pub vars: Vec<Range<usize>>,
    pub eval: Box<dyn Fn(&DVector<f64>) -> f64>,
    /// Adds this block's gradient into the full-size accumulator.
    pub gradient: Option<Box<dyn Fn(&DVector<f64>, &mut DVector<f64>)>>,
}

/// One stacked constraint block with bounds, reading a few variable ranges.
pub struct ConstraintBlock {
    pub dim: usize,
    pub vars: Vec<Range<usize>>,
    pub eval: Box<dyn Fn(&DVector<f64>) -> DVector<f64>>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub label: String,
}

/// Finite-dimensional program with block structure.
pub struct NlpProblem {
    pub dim: usize,
    pub cost_blocks: Vec<CostBlock>,
    pub constraint_blocks: Vec<ConstraintBlock>,
    pub variable_lower: DVector<f64>,
    pub variable_upper: DVector<f64>,
    pub initial_guess: DVector<f64>,
}

impl NlpProblem {
    pub fn constraint_dim(&self) -> usize {
        self.constraint_blocks.iter().map(|b| b.dim).sum()
    }

    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        self.cost_blocks.iter().map(|b| (b.eval)(x)).sum()
    }

    pub fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.constraint_dim());
        let mut row = 0;
        for b in &self.constraint_blocks {
            let v = (b.eval)(x);
            debug_assert_eq!(v.len(), b.dim, "constraint block `{}` dimension", b.label);
            out.rows_mut(row, b.dim).copy_from(&v);
            row += b.dim;
        }
        out
    }

    pub fn constraint_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let m = self.constraint_dim();
        let mut lo = DVector::zeros(m);
        let mut hi = DVector::zeros(m);
        let mut row = 0;
        for b in &self.constraint_blocks {
            lo.rows_mut(row, b.dim).copy_from(&b.lower);
            hi.rows_mut(row, b.dim).copy_from(&b.upper);
            row += b.dim;
        }
        (lo, hi)
    }

    /// Cost gradient, analytic per block where available, otherwise central
    /// finite differences restricted to the block's variable ranges.
    pub fn cost_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.dim);
        let mut xp = x.clone();
        for b in &self.cost_blocks {
            if let Some(g) = &b.gradient {
                g(x, &mut grad);
            } else {
                for range in &b.vars {
                    for j in range.clone() {
                        let h = fd_step(x[j]);
                        xp[j] = x[j] + h;
                        let up = (b.eval)(&xp);
                        xp[j] = x[j] - h;
                        let dn = (b.eval)(&xp);
                        xp[j] = x[j];
                        grad[j] += (up - dn) / (2.0 * h);
                    }
                }
            }
        }
        grad
    }

    /// Dense constraint Jacobian via central finite differences; only the
    /// columns named by each block's variable ranges are probed.
    pub fn constraint_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let m = self.constraint_dim();
        let mut jac = DMatrix::zeros(m, self.dim);
        let mut row = 0;
        let mut xp = x.clone();
        for b in &self.constraint_blocks {
            for range in &b.vars {
                for j in range.clone() {
                    let h = fd_step(x[j]);
                    xp[j] = x[j] + h;
                    let up = (b.eval)(&xp);
                    xp[j] = x[j] - h;
                    let dn = (b.eval)(&xp);
                    xp[j] = x[j];
                    let col = (up - dn) / (2.0 * h);
                    for i in 0..b.dim {
                        jac[(row + i, j)] = col[i];
                    }
                }
            }
            row += b.dim;
        }
        jac
    }

    /// Constraint Jacobian probing every column of every block, ignoring the
    /// declared variable ranges. Oracle counterpart of
    /// [`NlpProblem::constraint_jacobian`].
    pub fn constraint_jacobian_dense_probe(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let m = self.constraint_dim();
        let mut jac = DMatrix::zeros(m, self.dim);
        let mut xp = x.clone();
        for j in 0..self.dim {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            let up = self.constraints(&xp);
            xp[j] = x[j] - h;
            let dn = self.constraints(&xp);
            xp[j] = x[j];
            let col = (up - dn) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }
}

/// Relative-scaled central-difference step.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Defect function of one shooting interval, `x_k + dt S b - x_{k+1}`.
///
/// Explicit tableaux evaluate the stages by forward substitution on `x_k`.
/// Backward Euler and the implicit trapezoidal scheme have stages expressible
/// through the interval endpoints, so their defects are algebraic in
/// `(x_k, u_k, x_{k+1})`; other implicit tableaux fall back to the Newton
/// stage solve inside the defect.
fn interval_defect(
    tableau: &ButcherTableau,
    dynamics: &Dynamics,
    xk: &DVector<f64>,
    uk: &DVector<f64>,
    xk1: &DVector<f64>,
    t: f64,
    dt: f64,
) -> DVector<f64> {
    let f = |x: &DVector<f64>, u: &DVector<f64>, t: f64| dynamics(x, u, t);
    if tableau.is_explicit() {
        let next = integrators::step(tableau, &f, xk, uk, t, dt).expect("explicit step cannot fail");
        return next - xk1;
    }
    if tableau.name == "backward_euler" {
        return xk + dt * dynamics(xk1, uk, t + dt) - xk1;
    }
    if tableau.name == "implicit_trapezoidal" {
        return xk + 0.5 * dt * (dynamics(xk, uk, t) + dynamics(xk1, uk, t + dt)) - xk1;
    }
    match integrators::step(tableau, &f, xk, uk, t, dt) {
        Ok(next) => next - xk1,
        // Non-convergence surfaces as a large defect rather than a panic; the
        // NLP solver backtracks away from such regions.
        Err(_) => DVector::from_element(xk.len(), 1e6),
    }
}

/// Multiple-shooting transcription: one defect block per interval, path
/// constraints repeated at the shooting nodes, discretized cost
/// `m(x_N) + sum l(x_k, u_k) dt`.
pub fn transcribe_multiple_shooting(
    ocp: &OcpProblem,
    tableau: &ButcherTableau,
    intervals: usize,
    x0: &DVector<f64>,
) -> Result<(NlpProblem, VariableLayout), OcpError> {
    if x0.len() != ocp.state_dim {
        return Err(OcpError::Dimension(format!(
            "x0 has {} entries, state dimension is {}",
            x0.len(),
            ocp.state_dim
        )));
    }
    if intervals == 0 {
        return Err(OcpError::Dimension("at least one shooting interval required".into()));
    }
    let layout = VariableLayout { state_dim: ocp.state_dim, control_dim: ocp.control_dim, intervals };
    let dt = (ocp.t_final - ocp.t0) / intervals as f64;
    let n = ocp.state_dim;
    let m = ocp.control_dim;
    let dim = layout.dim();

    let mut constraint_blocks = Vec::new();
    for k in 0..intervals {
        let tableau = tableau.clone();
        let dynamics = ocp.dynamics.clone();
        let layout_k = layout.clone();
        let x0k = x0.clone();
        let t = ocp.t0 + k as f64 * dt;
        let mut vars = vec![layout.control(k)];
        if k >= 1 {
            vars.push(layout.state(k));
        }
        vars.push(layout.state(k + 1));
        constraint_blocks.push(ConstraintBlock {
            dim: n,
            vars,
            eval: Box::new(move |z: &DVector<f64>| {
                let uk = z.rows(layout_k.control(k).start, m).into_owned();
                let xk = if k == 0 {
                    x0k.clone()
                } else {
                    z.rows(layout_k.state(k).start, n).into_owned()
                };
                let xk1 = z.rows(layout_k.state(k + 1).start, n).into_owned();
                interval_defect(&tableau, &dynamics, &xk, &uk, &xk1, t, dt)
            }),
            lower: DVector::zeros(n),
            upper: DVector::zeros(n),
            label: format!("defect[{k}]"),
        });
    }
    if let Some(path) = &ocp.path {
        for k in 0..intervals {
            let eval = path.eval.clone();
            let layout_k = layout.clone();
            let x0k = x0.clone();
            let t = ocp.t0 + k as f64 * dt;
            let mut vars = vec![layout.control(k)];
            if k >= 1 {
                vars.push(layout.state(k));
            }
            constraint_blocks.push(ConstraintBlock {
                dim: path.dim,
                vars,
                eval: Box::new(move |z: &DVector<f64>| {
                    let uk = z.rows(layout_k.control(k).start, m).into_owned();
                    let xk = if k == 0 {
                        x0k.clone()
                    } else {
                        z.rows(layout_k.state(k).start, n).into_owned()
                    };
                    eval(&xk, &uk, t)
                }),
                lower: path.lower.clone(),
                upper: path.upper.clone(),
                label: format!("path[{k}]"),
            });
        }
    }

    let mut cost_blocks = Vec::new();
    if let Some(lagrange) = &ocp.lagrange {
        for k in 0..intervals {
            let lagrange = lagrange.clone();
            let layout_k = layout.clone();
            let x0k = x0.clone();
            let mut vars = vec![layout.control(k)];
            if k >= 1 {
                vars.push(layout.state(k));
            }
            cost_blocks.push(CostBlock {
                vars,
                eval: Box::new(move |z: &DVector<f64>| {
                    let uk = z.rows(layout_k.control(k).start, m).into_owned();
                    let xk = if k == 0 {
                        x0k.clone()
                    } else {
                        z.rows(layout_k.state(k).start, n).into_owned()
                    };
                    lagrange(&xk, &uk) * dt
                }),
                gradient: None,
            });
        }
    }
    if let Some(mayer) = &ocp.mayer {
        let mayer = mayer.clone();
        let layout_k = layout.clone();
        cost_blocks.push(CostBlock {
            vars: vec![layout.state(intervals)],
            eval: Box::new(move |z: &DVector<f64>| {
                let xn = z.rows(layout_k.state(layout_k.intervals).start, n).into_owned();
                mayer(&xn)
            }),
            gradient: None,
        });
    }

    // Control bounds on the control slots; states unbounded.
    let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(dim, f64::INFINITY);
    for k in 0..intervals {
        let r = layout.control(k);
        lower.rows_mut(r.start, m).copy_from(&ocp.control_lower);
        upper.rows_mut(r.start, m).copy_from(&ocp.control_upper);
    }

    // Hold the initial state across the horizon as a neutral starting guess.
    let mut guess = DVector::zeros(dim);
    for k in 1..=intervals {
        guess.rows_mut(layout.state(k).start, n).copy_from(x0);
    }

    Ok((
        NlpProblem {
            dim,
            cost_blocks,
            constraint_blocks,
            variable_lower: lower,
            variable_upper: upper,
            initial_guess: guess,
        },
        layout,
    ))
}

/// Terminal-state map of a forward-Euler discretized LTI system:
/// `x(T) = (I + dt A)^N x0 + C [u_0; ...; u_{N-1}]` with `C` the
/// controllability matrix.
pub struct SingleShootingLti {
    pub state_map: DMatrix<f64>,
    pub controllability: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl SingleShootingLti {
    pub fn terminal_state(&self, controls: &DVector<f64>) -> DVector<f64> {
        &self.state_map * &self.x0 + &self.controllability * controls
    }
}

pub fn transcribe_single_shooting_lti(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: &DVector<f64>,
    intervals: usize,
    dt: f64,
) -> SingleShootingLti {
    let n = a.nrows();
    let ad = DMatrix::identity(n, n) + dt * a;
    let bd = dt * b;
    let m = b.ncols();
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..=intervals {
        let next = &powers[k - 1] * &ad;
        powers.push(next);
    }
    let mut controllability = DMatrix::zeros(n, intervals * m);
    for k in 0..intervals {
        // Column block k multiplies u_k and carries (I + dt A)^(N-1-k) dt B.
        let block = &powers[intervals - 1 - k] * &bd;
        controllability.view_mut((0, k * m), (n, m)).copy_from(&block);
    }
    SingleShootingLti { state_map: powers[intervals].clone(), controllability, x0: x0.clone() }
}

/// Per-step record of a receding-horizon run.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub step: usize,
    pub solve_time_s: f64,
    pub iterations: usize,
    pub cost: f64,
    pub kkt_residual: f64,
    pub feasibility: f64,
}

/// Diagnostics CSV: `step,solve_time_s,iterations,cost,kkt_residual,feasibility`.
pub fn diagnostics_csv(rows: &[StepDiagnostics]) -> String {
    let mut out = String::from("step,solve_time_s,iterations,cost,kkt_residual,feasibility\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.solve_time_s, r.iterations, r.cost, r.kkt_residual, r.feasibility
        )
        .unwrap();
    }
    out
}

/// Solution of one finite-horizon controller solve.
#[derive(Debug, Clone)]
pub struct MpcPlan {
    /// Planned controls `u_0 .. u_{N-1}`.
    pub controls: Vec<DVector<f64>>,
    /// Planned states `x_0 .. x_N`.
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub feasibility: f64,
}

impl MpcPlan {
    /// Horizon shift: drops the first node and duplicates the final one into
    /// the vacated tail slot.
    pub fn shifted(&self) -> MpcPlan {
        let mut plan = self.clone();
        if plan.controls.len() > 1 {
            plan.controls.rotate_left(1);
            let last = plan.controls.len() - 1;
            plan.controls[last] = plan.controls[last - 1].clone();
        }
        if plan.states.len() > 1 {
            plan.states.rotate_left(1);
            let last = plan.states.len() - 1;
            plan.states[last] = plan.states[last - 1].clone();
        }
        plan
    }
}

/// A controller solving one finite-horizon problem from the current state,
/// optionally seeded with a shifted previous plan.
pub type Controller<'a> =
    dyn FnMut(&DVector<f64>, f64, Option<&MpcPlan>) -> Result<MpcPlan, OcpError> + 'a;

/// One plant transition over a control period.
pub type Plant<'a> = dyn FnMut(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + 'a;

/// Receding-horizon loop: at each tick only the first planned control is
/// applied, the horizon shifts, and the next solve starts from fresh
/// feedback. With `warm_start` the shifted previous plan seeds the solve.
pub fn receding_horizon_run(
    controller: &mut Controller,
    plant: &mut Plant,
    x0: &DVector<f64>,
    t0: f64,
    dt: f64,
    steps: usize,
    warm_start: bool,
) -> Result<(Trajectory, Vec<StepDiagnostics>), OcpError> {
    let mut x = x0.clone();
    let mut t = t0;
    let mut times = vec![t0];
    let mut states = vec![x0.clone()];
    let mut controls = Vec::new();
    let mut diagnostics = Vec::new();
    let mut previous: Option<MpcPlan> = None;

    for step in 0..steps {
        let seed = if warm_start { previous.as_ref().map(|p| p.shifted()) } else { None };
        let start = std::time::Instant::now();
        let plan = controller(&x, t, seed.as_ref()).map_err(|e| match e {
            OcpError::Infeasible { detail, .. } => OcpError::Infeasible { step, detail },
            OcpError::SolverFailure { detail, .. } => OcpError::SolverFailure { step, detail },
            other => other,
        })?;
        let elapsed = start.elapsed().as_secs_f64();
        diagnostics.push(StepDiagnostics {
            step,
            solve_time_s: elapsed,
            iterations: plan.iterations,
            cost: plan.cost,
            kkt_residual: plan.kkt_residual,
            feasibility: plan.feasibility,
        });
        let u = plan.controls[0].clone();
        x = plant(&x, &u, t);
        t += dt;
        times.push(t);
        states.push(x.clone());
        controls.push(u);
        previous = Some(plan);
    }

    let trajectory = Trajectory { times, states, controls };
    trajectory.validate()?;
    Ok((trajectory, diagnostics))
}

/// Time-increasing task-weight multiplier `w (1 + kappa t)`; counteracts goal
/// procrastination over receding-horizon runs. `kappa = 0` leaves weights
/// untouched.
pub fn procrastination_multiplier(kappa: f64, t: f64) -> f64 {
    1.0 + kappa * t
}
