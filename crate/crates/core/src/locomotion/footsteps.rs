//! Footstep planning on the discretized closed-loop unicycle trajectory,
//! gait phase bookkeeping and plan merging at double-support midpoints.

use super::unicycle::{rotation2, unicycle_control, UnicycleState};
use super::LocomotionError;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Foot {
    Left,
    Right,
}

impl Foot {
    pub fn other(&self) -> Foot {
        match self {
            Foot::Left => Foot::Right,
            Foot::Right => Foot::Left,
        }
    }
}

/// One planned footfall: planar pose plus the impact instant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Footstep {
    pub foot: Foot,
    #[serde(with = "vector2_serde")]
    pub position: Vector2<f64>,
    pub yaw: f64,
    pub impact_time: f64,
}

mod vector2_serde {
    use nalgebra::Vector2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector2<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector2<f64>, D::Error> {
        let a = <[f64; 2]>::deserialize(d)?;
        Ok(Vector2::new(a[0], a[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseKind {
    SwitchIn,
    Stance,
    SwitchOut,
    Swing,
}

/// Per-foot phase interval of the gait schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhaseInterval {
    pub foot: Foot,
    pub kind: PhaseKind,
    pub start: f64,
    pub end: f64,
}

/// Starting double-support configuration.
#[derive(Debug, Clone, Copy)]
pub struct InitialFeet {
    pub left: (Vector2<f64>, f64),
    pub right: (Vector2<f64>, f64),
}

/// Footstep list, phase schedule and merge points of one planning run.
#[derive(Debug, Clone)]
pub struct GaitPlan {
    pub initial: InitialFeet,
    pub footsteps: Vec<Footstep>,
    pub phases: Vec<PhaseInterval>,
    /// Double-support midpoints, where a newer plan may replace the tail.
    pub merge_points: Vec<f64>,
    pub double_support: f64,
    pub start_time: f64,
    pub horizon_end: f64,
}

impl GaitPlan {
    /// Poses of (left, right) feet at time `t`, replaying the impacts.
    pub fn feet_at(&self, t: f64) -> ((Vector2<f64>, f64), (Vector2<f64>, f64)) {
        let mut left = self.initial.left;
        let mut right = self.initial.right;
        for step in &self.footsteps {
            if step.impact_time <= t + 1e-12 {
                match step.foot {
                    Foot::Left => left = (step.position, step.yaw),
                    Foot::Right => right = (step.position, step.yaw),
                }
            }
        }
        (left, right)
    }

    /// The foot airborne at time `t`, if any.
    pub fn swing_foot_at(&self, t: f64) -> Option<Foot> {
        self.phases
            .iter()
            .find(|p| p.kind == PhaseKind::Swing && p.start <= t && t < p.end)
            .map(|p| p.foot)
    }

    /// Phase-legality check: per foot, the sequence after an impact is
    /// switch-in, stance, switch-out, swing, in contiguous intervals.
    pub fn validate_phases(&self) -> Result<(), LocomotionError> {
        for foot in [Foot::Left, Foot::Right] {
            let mine: Vec<&PhaseInterval> = self.phases.iter().filter(|p| p.foot == foot).collect();
            for pair in mine.windows(2) {
                if (pair[0].end - pair[1].start).abs() > 1e-9 {
                    return Err(LocomotionError::Planning(format!(
                        "{foot:?} phases are not contiguous at t = {}",
                        pair[0].end
                    )));
                }
                let legal = matches!(
                    (pair[0].kind, pair[1].kind),
                    (PhaseKind::SwitchIn, PhaseKind::Stance)
                        | (PhaseKind::Stance, PhaseKind::SwitchOut)
                        | (PhaseKind::SwitchOut, PhaseKind::Swing)
                        | (PhaseKind::Swing, PhaseKind::SwitchIn)
                );
                if !legal {
                    return Err(LocomotionError::Planning(format!(
                        "{foot:?} phase order {:?} -> {:?}",
                        pair[0].kind, pair[1].kind
                    )));
                }
            }
        }
        // Impact times strictly increasing per foot.
        for foot in [Foot::Left, Foot::Right] {
            let times: Vec<f64> = self
                .footsteps
                .iter()
                .filter(|s| s.foot == foot)
                .map(|s| s.impact_time)
                .collect();
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(LocomotionError::Planning(format!("{foot:?} impact times not increasing")));
            }
        }
        Ok(())
    }

    /// Footstep JSON: array of `{foot, x, y, yaw, t_impact}` plus the phase
    /// schedule.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct StepJson<'a> {
            foot: &'a str,
            x: f64,
            y: f64,
            yaw: f64,
            t_impact: f64,
        }
        #[derive(Serialize)]
        struct PhaseJson<'a> {
            foot: &'a str,
            kind: &'a str,
            start: f64,
            end: f64,
        }
        #[derive(Serialize)]
        struct PlanJson<'a> {
            footsteps: Vec<StepJson<'a>>,
            phases: Vec<PhaseJson<'a>>,
            merge_points: &'a [f64],
        }
        let footsteps = self
            .footsteps
            .iter()
            .map(|s| StepJson {
                foot: match s.foot {
                    Foot::Left => "left",
                    Foot::Right => "right",
                },
                x: s.position.x,
                y: s.position.y,
                yaw: s.yaw,
                t_impact: s.impact_time,
            })
            .collect();
        let phases = self
            .phases
            .iter()
            .map(|p| PhaseJson {
                foot: match p.foot {
                    Foot::Left => "left",
                    Foot::Right => "right",
                },
                kind: match p.kind {
                    PhaseKind::SwitchIn => "switch_in",
                    PhaseKind::Stance => "stance",
                    PhaseKind::SwitchOut => "switch_out",
                    PhaseKind::Swing => "swing",
                },
                start: p.start,
                end: p.end,
            })
            .collect();
        serde_json::to_string_pretty(&PlanJson { footsteps, phases, merge_points: &self.merge_points })
            .expect("plan serialization cannot fail")
    }
}

/// Planner tuning: cost weights, per-step constraint bounds, sampling step
/// and gait timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FootstepParams {
    /// Weight on 1/dt^2 (penalizes fast steps).
    pub k_t: f64,
    /// Weight on the squared feet distance (penalizes long steps).
    pub k_p: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Maximum feet distance at touchdown.
    pub d_max: f64,
    /// Maximum relative yaw of the two feet.
    pub theta_max: f64,
    /// Lower bound on the left foot's y-coordinate in the right foot frame.
    pub w_min: f64,
    /// Candidate sampling step.
    pub dt: f64,
    /// Double-support duration; must not exceed `t_min`.
    pub double_support: f64,
    /// Skip steps whose swing-foot displacement stays below this bound.
    pub pause_threshold: f64,
    pub horizon: f64,
    /// Feedback gain of the closed-loop unicycle (diagonal).
    pub gain: f64,
}

impl Default for FootstepParams {
    fn default() -> Self {
        FootstepParams {
            k_t: 1.0,
            k_p: 20.0,
            t_min: 0.9,
            t_max: 5.0,
            d_max: 0.35,
            theta_max: 0.4,
            w_min: 0.08,
            dt: 0.05,
            double_support: 0.4,
            pause_threshold: 0.02,
            horizon: 12.0,
            gain: 1.5,
        }
    }
}

/// Constraint bundle of one candidate footstep, checked both inside the
/// planner and by the re-validation oracle.
#[derive(Debug, Clone, Copy)]
pub struct CandidateCheck {
    pub dt_ok: bool,
    pub distance_ok: bool,
    pub yaw_ok: bool,
    pub width_ok: bool,
}

impl CandidateCheck {
    pub fn all(&self) -> bool {
        self.dt_ok && self.distance_ok && self.yaw_ok && self.width_ok
    }
}

/// Left foot position expressed in the right foot frame.
pub fn left_in_right_frame(
    left: &(Vector2<f64>, f64),
    right: &(Vector2<f64>, f64),
) -> Vector2<f64> {
    rotation2(right.1).transpose() * (left.0 - right.0)
}

/// Checks the four footstep constraints for a new pose of `foot` against the
/// stance pose of the other foot.
pub fn check_candidate(
    foot: Foot,
    new_pose: &(Vector2<f64>, f64),
    stance_pose: &(Vector2<f64>, f64),
    delta_t: f64,
    params: &FootstepParams,
) -> CandidateCheck {
    let delta_p = (new_pose.0 - stance_pose.0).norm();
    let delta_theta = wrap_angle(new_pose.1 - stance_pose.1).abs();
    let o_l = match foot {
        Foot::Left => left_in_right_frame(new_pose, stance_pose),
        Foot::Right => left_in_right_frame(stance_pose, new_pose),
    };
    CandidateCheck {
        dt_ok: delta_t >= params.t_min - 1e-12 && delta_t <= params.t_max + 1e-12,
        distance_ok: delta_p <= params.d_max + 1e-12,
        yaw_ok: delta_theta <= params.theta_max + 1e-12,
        width_ok: o_l.y >= params.w_min - 1e-12,
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

pub fn step_cost(delta_t: f64, delta_p: f64, params: &FootstepParams) -> f64 {
    params.k_t / (delta_t * delta_t) + params.k_p * delta_p * delta_p
}

/// Samples of the closed-loop unicycle at the planner rate.
pub fn rollout_unicycle(
    mut state: UnicycleState,
    reference: &dyn Fn(f64) -> (Vector2<f64>, Vector2<f64>),
    params: &FootstepParams,
    t0: f64,
) -> Vec<(f64, UnicycleState)> {
    let gain = Matrix2::identity() * params.gain;
    let steps = (params.horizon / params.dt).ceil() as usize;
    let substeps = 4;
    let mut samples = vec![(t0, state)];
    for k in 0..steps {
        for s in 0..substeps {
            let t = t0 + k as f64 * params.dt + s as f64 * params.dt / substeps as f64;
            let (target, rate) = reference(t);
            let (v, omega) = match unicycle_control(&state, &target, &rate, &gain) {
                Ok(c) => c,
                Err(_) => (0.0, 0.0),
            };
            state = state.advance(v, omega, params.dt / substeps as f64);
        }
        samples.push((t0 + (k + 1) as f64 * params.dt, state));
    }
    samples
}

/// Plans footsteps over the horizon: integrate the closed-loop unicycle,
/// enumerate candidate impact instants, keep those satisfying all four
/// constraints and pick the cost minimizer; repeat until the horizon is
/// filled, the reference pauses, or no candidate is feasible.
pub fn plan_footsteps(
    reference: &dyn Fn(f64) -> (Vector2<f64>, Vector2<f64>),
    params: &FootstepParams,
    initial: &InitialFeet,
    unicycle: UnicycleState,
    first_swing: Foot,
    t0: f64,
) -> Result<GaitPlan, LocomotionError> {
    if params.t_min > params.t_max {
        return Err(LocomotionError::Planning("t_min exceeds t_max".into()));
    }
    if params.double_support > params.t_min {
        return Err(LocomotionError::Planning(
            "double-support duration exceeds the minimum step time".into(),
        ));
    }
    let samples = rollout_unicycle(unicycle, reference, params, t0);

    let mut left = initial.left;
    let mut right = initial.right;
    let mut footsteps = Vec::new();
    let mut swing = first_swing;
    let mut last_impact = t0;
    let horizon_end = t0 + params.horizon;

    loop {
        let stance_pose = match swing {
            Foot::Left => right,
            Foot::Right => left,
        };
        let current_swing_pose = match swing {
            Foot::Left => left,
            Foot::Right => right,
        };

        // Enumerate the sampled instants within the admissible window.
        let mut best: Option<(f64, Footstep)> = None;
        let mut any_candidate_in_window = false;
        for (t, state) in &samples {
            let delta_t = t - last_impact;
            if delta_t < params.t_min || delta_t > params.t_max {
                continue;
            }
            any_candidate_in_window = true;
            let (wl, wr) = state.wheel_positions();
            let position = match swing {
                Foot::Left => wl,
                Foot::Right => wr,
            };
            let pose = (position, state.heading);
            if !check_candidate(swing, &pose, &stance_pose, delta_t, params).all() {
                continue;
            }
            let cost = step_cost(delta_t, (pose.0 - stance_pose.0).norm(), params);
            if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                best = Some((
                    cost,
                    Footstep { foot: swing, position: pose.0, yaw: pose.1, impact_time: *t },
                ));
            }
        }

        let Some((_, step)) = best else {
            if !any_candidate_in_window {
                break; // horizon exhausted
            }
            return Err(LocomotionError::Planning(format!(
                "no feasible candidate in [{:.2}, {:.2}] s for {:?}: all sampled poses violate \
                 the distance/yaw/width constraint set",
                last_impact + params.t_min,
                last_impact + params.t_max,
                swing
            )));
        };

        // Pause behavior: a nearly stationary reference produces candidates
        // on top of the current swing foot; stop in double support instead of
        // stepping in place.
        if (step.position - current_swing_pose.0).norm() < params.pause_threshold
            && wrap_angle(step.yaw - current_swing_pose.1).abs() < params.pause_threshold
        {
            break;
        }

        match swing {
            Foot::Left => left = (step.position, step.yaw),
            Foot::Right => right = (step.position, step.yaw),
        }
        last_impact = step.impact_time;
        footsteps.push(step);
        swing = swing.other();
        if last_impact + params.t_min > horizon_end {
            break;
        }
    }

    let (phases, merge_points) = build_schedule(&footsteps, params.double_support, t0, horizon_end);
    let plan = GaitPlan {
        initial: *initial,
        footsteps,
        phases,
        merge_points,
        double_support: params.double_support,
        start_time: t0,
        horizon_end,
    };
    plan.validate_phases()?;
    Ok(plan)
}

/// Phase schedule implied by a footstep list: after each impact both feet
/// hold a double support of the configured duration (landing foot switches
/// in, the other switches out), then the other foot swings to its next
/// impact.
fn build_schedule(
    footsteps: &[Footstep],
    double_support: f64,
    t0: f64,
    horizon_end: f64,
) -> (Vec<PhaseInterval>, Vec<f64>) {
    let mut phases = Vec::new();
    let mut merge_points = vec![t0];
    for (i, step) in footsteps.iter().enumerate() {
        let ds_end = step.impact_time + double_support;
        merge_points.push(step.impact_time + 0.5 * double_support);
        phases.push(PhaseInterval {
            foot: step.foot,
            kind: PhaseKind::SwitchIn,
            start: step.impact_time,
            end: ds_end,
        });
        phases.push(PhaseInterval {
            foot: step.foot.other(),
            kind: PhaseKind::SwitchOut,
            start: step.impact_time,
            end: ds_end,
        });
        let next_impact = footsteps.get(i + 1).map(|s| s.impact_time);
        let stance_end = next_impact.unwrap_or(horizon_end).max(ds_end);
        phases.push(PhaseInterval {
            foot: step.foot,
            kind: PhaseKind::Stance,
            start: ds_end,
            end: stance_end,
        });
        if let Some(next) = next_impact {
            phases.push(PhaseInterval {
                foot: step.foot.other(),
                kind: PhaseKind::Swing,
                start: ds_end,
                end: next,
            });
        }
    }
    (phases, merge_points)
}

/// Splices `new` onto `old` at a merge point: the output equals `old` before
/// `merge_time` and `new` after. Requires pose continuity of both feet at the
/// merge instant.
pub fn merge_plans(old: &GaitPlan, new: &GaitPlan, merge_time: f64) -> Result<GaitPlan, LocomotionError> {
    if !old.merge_points.iter().any(|&m| (m - merge_time).abs() <= 1e-9) {
        return Err(LocomotionError::Merge(format!(
            "t = {merge_time} is not a merge point of the old plan"
        )));
    }
    let (old_left, old_right) = old.feet_at(merge_time);
    let (new_left, new_right) = new.feet_at(merge_time);
    let mismatch = (old_left.0 - new_left.0)
        .norm()
        .max((old_right.0 - new_right.0).norm())
        .max((old_left.1 - new_left.1).abs())
        .max((old_right.1 - new_right.1).abs());
    if mismatch > 1e-9 {
        return Err(LocomotionError::Merge(format!(
            "feet poses differ by {mismatch:.3e} at the merge point"
        )));
    }

    let mut footsteps: Vec<Footstep> = old
        .footsteps
        .iter()
        .filter(|s| s.impact_time <= merge_time + 1e-12)
        .copied()
        .collect();
    footsteps.extend(new.footsteps.iter().filter(|s| s.impact_time > merge_time + 1e-12).copied());

    let horizon_end = new.horizon_end.max(old.horizon_end);
    let (phases, merge_points) =
        build_schedule(&footsteps, old.double_support, old.start_time, horizon_end);
    let merged = GaitPlan {
        initial: old.initial,
        footsteps,
        phases,
        merge_points,
        double_support: old.double_support,
        start_time: old.start_time,
        horizon_end,
    };
    merged.validate_phases()?;
    Ok(merged)
}
