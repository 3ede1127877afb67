//! Single-step Runge-Kutta integration driven by Butcher tableaux.
//!
//! Explicit tableaux are evaluated by forward substitution over the stages;
//! implicit tableaux solve the stage fixed point with a damped Newton
//! iteration on a finite-difference stage Jacobian. Controls are held
//! piecewise constant across the step.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error("tableau `{name}` is inconsistent: {reason}")]
    BadTableau { name: String, reason: String },
    #[error("implicit stage Newton did not converge after {iterations} iterations, residual {residual:.3e}")]
    StageNewtonDiverged { iterations: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Right-hand side of `x_dot = f(x, u, t)`.
pub type DynamicsFunction<'a> = dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + 'a;

/// Runge-Kutta coefficient table `(A, b, c)`.
#[derive(Debug, Clone)]
pub struct ButcherTableau {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinTableau {
    ForwardEuler,
    BackwardEuler,
    ImplicitTrapezoidal,
    Rk4,
}

/// The coefficient tables of the four built-in schemes.
pub fn builtin_tableau(which: BuiltinTableau) -> ButcherTableau {
    let t = match which {
        BuiltinTableau::ForwardEuler => ButcherTableau {
            a: DMatrix::from_row_slice(1, 1, &[0.0]),
            b: DVector::from_vec(vec![1.0]),
            c: DVector::from_vec(vec![0.0]),
            name: "forward_euler".into(),
        },
        BuiltinTableau::BackwardEuler => ButcherTableau {
            a: DMatrix::from_row_slice(1, 1, &[1.0]),
            b: DVector::from_vec(vec![1.0]),
            c: DVector::from_vec(vec![1.0]),
            name: "backward_euler".into(),
        },
        BuiltinTableau::ImplicitTrapezoidal => ButcherTableau {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.5]),
            b: DVector::from_vec(vec![0.5, 0.5]),
            c: DVector::from_vec(vec![0.0, 1.0]),
            name: "implicit_trapezoidal".into(),
        },
        BuiltinTableau::Rk4 => ButcherTableau {
            a: DMatrix::from_row_slice(
                4,
                4,
                &[
                    0.0, 0.0, 0.0, 0.0,
                    0.5, 0.0, 0.0, 0.0,
                    0.0, 0.5, 0.0, 0.0,
                    0.0, 0.0, 1.0, 0.0,
                ],
            ),
            b: DVector::from_vec(vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]),
            c: DVector::from_vec(vec![0.0, 0.5, 0.5, 1.0]),
            name: "rk4".into(),
        },
    };
    debug_assert!(t.validate().is_ok());
    t
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Explicit iff `a[i][j] = 0` for `j >= i`.
    pub fn is_explicit(&self) -> bool {
        let s = self.stages();
        (0..s).all(|i| (i..s).all(|j| self.a[(i, j)] == 0.0))
    }

    /// Consistency: `sum(b) = 1` and `c_i = sum_j a_ij`, both within 1e-12.
    pub fn validate(&self) -> Result<(), IntegratorError> {
        let s = self.stages();
        if self.a.nrows() != s || self.a.ncols() != s || self.c.len() != s {
            return Err(IntegratorError::BadTableau {
                name: self.name.clone(),
                reason: "A, b, c sizes disagree".into(),
            });
        }
        if (self.b.sum() - 1.0).abs() > 1e-12 {
            return Err(IntegratorError::BadTableau {
                name: self.name.clone(),
                reason: format!("sum(b) = {}", self.b.sum()),
            });
        }
        for i in 0..s {
            let row: f64 = (0..s).map(|j| self.a[(i, j)]).sum();
            if (row - self.c[i]).abs() > 1e-12 {
                return Err(IntegratorError::BadTableau {
                    name: self.name.clone(),
                    reason: format!("row {i} of A sums to {row}, c = {}", self.c[i]),
                });
            }
        }
        Ok(())
    }
}

/// Maximum Newton iterations for implicit stage solves.
pub const STAGE_NEWTON_MAX_ITERS: usize = 50;
/// Stage equation residual tolerance.
pub const STAGE_NEWTON_TOL: f64 = 1e-10;

/// Solved stages, one column per stage.
fn solve_stages(
    tableau: &ButcherTableau,
    f: &DynamicsFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DMatrix<f64>, IntegratorError> {
    let s = tableau.stages();
    let n = x.len();
    let mut stages = DMatrix::zeros(n, s);

    if tableau.is_explicit() {
        for i in 0..s {
            let mut xi = x.clone();
            for j in 0..i {
                if tableau.a[(i, j)] != 0.0 {
                    xi += dt * tableau.a[(i, j)] * stages.column(j);
                }
            }
            stages.set_column(i, &f(&xi, u, t + tableau.c[i] * dt));
        }
        return Ok(stages);
    }

    // Implicit: damped Newton on the stacked stage fixed point
    // K_i = f(x + dt sum_j a_ij K_j, u, t + c_i dt).
    let residual = |k: &DVector<f64>| -> DVector<f64> {
        let mut r = DVector::zeros(s * n);
        for i in 0..s {
            let mut xi = x.clone();
            for j in 0..s {
                if tableau.a[(i, j)] != 0.0 {
                    xi += dt * tableau.a[(i, j)] * k.rows(j * n, n);
                }
            }
            let fi = f(&xi, u, t + tableau.c[i] * dt);
            r.rows_mut(i * n, n).copy_from(&(k.rows(i * n, n) - fi));
        }
        r
    };

    // Seed with the explicit Euler slope at the node.
    let f0 = f(x, u, t);
    let mut k = DVector::zeros(s * n);
    for i in 0..s {
        k.rows_mut(i * n, n).copy_from(&f0);
    }
    let mut r = residual(&k);
    for _ in 0..STAGE_NEWTON_MAX_ITERS {
        let rnorm = r.norm();
        if rnorm < STAGE_NEWTON_TOL {
            for i in 0..s {
                stages.set_column(i, &k.rows(i * n, n));
            }
            return Ok(stages);
        }
        // Finite-difference stage Jacobian.
        let m = s * n;
        let mut jac = DMatrix::zeros(m, m);
        for col in 0..m {
            let h = 1e-7 * k[col].abs().max(1.0);
            let mut kp = k.clone();
            kp[col] += h;
            let rp = residual(&kp);
            jac.set_column(col, &((rp - &r) / h));
        }
        let delta = jac
            .lu()
            .solve(&-&r)
            .ok_or(IntegratorError::StageNewtonDiverged { iterations: 0, residual: rnorm })?;
        // Damping: halve until the residual does not increase.
        let mut alpha = 1.0;
        loop {
            let k_try = &k + alpha * &delta;
            let r_try = residual(&k_try);
            if r_try.norm() <= rnorm || alpha < 1.0 / 1024.0 {
                k = k_try;
                r = r_try;
                break;
            }
            alpha *= 0.5;
        }
    }
    Err(IntegratorError::StageNewtonDiverged {
        iterations: STAGE_NEWTON_MAX_ITERS,
        residual: r.norm(),
    })
}

/// One integration step `x + dt S b` with the stages of `tableau`.
pub fn step(
    tableau: &ButcherTableau,
    f: &DynamicsFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>, IntegratorError> {
    let stages = solve_stages(tableau, f, x, u, t, dt)?;
    Ok(x + dt * stages * &tableau.b)
}

/// Time grid, state samples and control samples of a simulated run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One state per grid point, `times.len()` entries.
    pub states: Vec<DVector<f64>>,
    /// One control per interval, `times.len() - 1` entries.
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), IntegratorError> {
        if self.states.len() != self.times.len() {
            return Err(IntegratorError::Dimension("states/grid size mismatch".into()));
        }
        if self.controls.len() + 1 != self.times.len() {
            return Err(IntegratorError::Dimension("controls must have one entry per interval".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IntegratorError::Dimension("time grid must be strictly increasing".into()));
        }
        Ok(())
    }

    /// CSV with header `t,x0..x{n-1},u0..u{m-1}`; controls are blank on the
    /// final row.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..m {
            out.push_str(&format!(",u{i}"));
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for v in self.states[k].iter() {
                out.push_str(&format!(",{v}"));
            }
            if k < self.controls.len() {
                for v in self.controls[k].iter() {
                    out.push_str(&format!(",{v}"));
                }
            } else {
                for _ in 0..m {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Integrates over `grid`, applying `controls[k]` on the k-th interval.
pub fn simulate(
    tableau: &ButcherTableau,
    f: &DynamicsFunction,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    grid: &[f64],
) -> Result<Trajectory, IntegratorError> {
    if grid.len() != controls.len() + 1 {
        return Err(IntegratorError::Dimension(format!(
            "grid has {} points, needs {} controls, got {}",
            grid.len(),
            grid.len() - 1,
            controls.len()
        )));
    }
    let mut states = vec![x0.clone()];
    for k in 0..controls.len() {
        let dt = grid[k + 1] - grid[k];
        if dt <= 0.0 {
            return Err(IntegratorError::Dimension("time grid must be strictly increasing".into()));
        }
        let next = step(tableau, f, &states[k], &controls[k], grid[k], dt)?;
        states.push(next);
    }
    let trajectory = Trajectory { times: grid.to_vec(), states, controls: controls.to_vec() };
    trajectory.validate()?;
    Ok(trajectory)
}

/// Fits the slope of `log(error)` against `log(dt)` for a problem with a
/// known solution, over a dyadic step sweep.
pub fn estimate_order(
    tableau: &ButcherTableau,
    f: &DynamicsFunction,
    x0: &DVector<f64>,
    exact_terminal: &DVector<f64>,
    t_final: f64,
    dt_values: &[f64],
) -> Result<f64, IntegratorError> {
    let mut points = Vec::new();
    for &dt in dt_values {
        let n = (t_final / dt).round() as usize;
        let grid: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let controls = vec![DVector::zeros(0); n];
        let traj = simulate(tableau, f, x0, &controls, &grid)?;
        let err = (traj.states.last().unwrap() - exact_terminal).norm();
        if err > 0.0 {
            points.push((dt.ln(), err.ln()));
        }
    }
    // Least-squares slope.
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    Ok((n * sxy - sx * sy) / (n * sxx - sx * sx))
}
