//! Receding-horizon tracker for the unicycle.
//!
//! Each step minimizes
//!
//! ```text
//!   sum_{k=0..K} Q |x~_k - x_{t+k}|^2 + sum_{k<K} R |u_k|^2 + rho * sum pen(x~)
//! ```
//!
//! over the `K` controls by projected gradient descent, where `pen` is the
//! squared penetration into the inflated obstacles (and out of the workspace)
//! sampled along every predicted segment. Only the first control is applied.
//! The executed segment is then checked against the exact geometry; on a hit
//! the penalty weight doubles and the step is re-solved. When that still
//! fails and braking is enabled, the applied speed is halved until the step
//! is safe, down to standing still (which is always safe from a free state).

use serde::{Deserialize, Serialize};

use crate::dynamics::{step_unchecked, wrap_angle, ControlInput, DynamicsConfig, RobotState};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Trajectory, Workspace};

/// Fractions along each predicted segment where the obstacle penalty is sampled.
const PENALTY_SAMPLES: [f64; 8] = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

const STATIONARY: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub tracking_weight: f64,
    pub effort_weight: f64,
    pub obstacle_penalty: f64,
    pub max_solver_iters: usize,
    pub solver_step: f64,
    /// Margin added around every obstacle inside the penalty.
    pub inflation: f64,
    /// Number of penalty doublings before a step is declared infeasible.
    pub max_escalations: usize,
    /// Slow down instead of failing once escalation is exhausted.
    pub brake: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            tracking_weight: 1.0,
            effort_weight: 1e-4,
            obstacle_penalty: 10.0,
            max_solver_iters: 200,
            solver_step: 0.05,
            inflation: 0.05,
            max_escalations: 8,
            brake: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("mpc.horizon", "must be at least 1"));
        }
        for (name, v) in [
            ("mpc.tracking_weight", self.tracking_weight),
            ("mpc.effort_weight", self.effort_weight),
            ("mpc.obstacle_penalty", self.obstacle_penalty),
            ("mpc.solver_step", self.solver_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.inflation >= 0.0) {
            return Err(Error::invalid("mpc.inflation", "must be non-negative"));
        }
        Ok(())
    }
}

/// Track `reference` from the workspace start, returning the executed
/// trajectory with the same number of waypoints.
///
/// The result is always collision-free and dynamically feasible; if some
/// step cannot be made safe the call fails instead.
pub fn mpc_track(
    reference: &Trajectory,
    ws: &Workspace,
    dynamics: &DynamicsConfig,
    cfg: &MpcConfig,
) -> Result<Trajectory> {
    if reference.first().dist(ws.start) > 1e-9 {
        return Err(Error::invalid(
            "reference",
            "first waypoint must equal the workspace start",
        ));
    }
    let refs = reference.waypoints();
    let steps = reference.steps();
    let mut state = RobotState::new(ws.start, initial_heading(refs, ws));
    let mut executed = Vec::with_capacity(steps + 1);
    executed.push(state.position);
    let mut warm: Option<Vec<ControlInput>> = None;

    for t in 0..steps {
        let mut problem = Horizon {
            refs,
            t,
            start: state,
            ws,
            dynamics,
            cfg,
            rho: cfg.obstacle_penalty,
        };
        let mut controls = problem.initial_guess(warm.as_deref());
        let mut escalations = 0;
        let next = loop {
            controls = problem.solve(controls);
            let candidate = step_unchecked(state, controls[0], dynamics.dt);
            if !ws.segment_collides(state.position, candidate.position) {
                break candidate;
            }
            if escalations == cfg.max_escalations {
                match cfg.brake.then(|| brake(state, controls[0], ws, dynamics)).flatten() {
                    Some((u, s)) => {
                        controls[0] = u;
                        break s;
                    }
                    None => {
                        return Err(Error::InfeasibleTracking {
                            step: t,
                            escalations,
                        })
                    }
                }
            }
            escalations += 1;
            problem.rho *= 2.0;
        };
        state = next;
        executed.push(state.position);
        // shift the plan for the next warm start
        let mut shifted = controls[1..].to_vec();
        shifted.push(*controls.last().unwrap_or(&ControlInput::default()));
        warm = Some(shifted);
    }

    let out = Trajectory::new(executed)?;
    if !crate::dynamics::verify_feasible(&out, dynamics) {
        return Err(Error::InfeasibleTracking {
            step: steps,
            escalations: 0,
        });
    }
    Ok(out)
}

/// Halve the speed of `u` until the step from `state` is collision-free.
fn brake(
    state: RobotState,
    mut u: ControlInput,
    ws: &Workspace,
    dynamics: &DynamicsConfig,
) -> Option<(ControlInput, RobotState)> {
    for _ in 0..40 {
        u.v *= 0.5;
        let next = step_unchecked(state, u, dynamics.dt);
        if !ws.segment_collides(state.position, next.position) {
            return Some((u, next));
        }
    }
    u.v = 0.0;
    let next = step_unchecked(state, u, dynamics.dt);
    (!ws.segment_collides(state.position, next.position)).then_some((u, next))
}

/// Face the first reference displacement that actually moves.
fn initial_heading(refs: &[Point2], ws: &Workspace) -> f64 {
    refs.windows(2)
        .map(|w| w[1] - w[0])
        .find(|d| d.norm() > STATIONARY)
        .or_else(|| Some(ws.goal - ws.start).filter(|d| d.norm() > STATIONARY))
        .map(|d| d.y.atan2(d.x))
        .unwrap_or(0.0)
}

struct Horizon<'a> {
    refs: &'a [Point2],
    t: usize,
    start: RobotState,
    ws: &'a Workspace,
    dynamics: &'a DynamicsConfig,
    cfg: &'a MpcConfig,
    rho: f64,
}

impl Horizon<'_> {
    fn target(&self, k: usize) -> Point2 {
        self.refs[(self.t + k).min(self.refs.len() - 1)]
    }

    fn project(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            v: u.v.clamp(0.0, self.dynamics.v_max),
            omega: u.omega.clamp(-self.dynamics.omega_max, self.dynamics.omega_max),
        }
    }

    /// Drive toward each successive target and turn to face the one after.
    fn pursuit(&self) -> Vec<ControlInput> {
        let dt = self.dynamics.dt;
        let mut s = self.start;
        let mut out = Vec::with_capacity(self.cfg.horizon);
        for k in 0..self.cfg.horizon {
            let (sin, cos) = s.heading.sin_cos();
            let along = (self.target(k + 1) - s.position).dot(Point2::new(cos, sin));
            let v = (along / dt).clamp(0.0, self.dynamics.v_max);
            let next = s.position + Point2::new(cos, sin) * (dt * v);
            let want = self.target(k + 2) - next;
            let omega = if want.norm() > STATIONARY {
                wrap_angle(want.y.atan2(want.x) - s.heading) / dt
            } else {
                0.0
            };
            let u = self.project(ControlInput::new(v, omega));
            s = step_unchecked(s, u, dt);
            out.push(u);
        }
        out
    }

    fn initial_guess(&self, warm: Option<&[ControlInput]>) -> Vec<ControlInput> {
        let pursuit = self.pursuit();
        match warm {
            Some(w) if w.len() == pursuit.len() => {
                let w: Vec<_> = w.iter().map(|&u| self.project(u)).collect();
                if self.cost(&w, None) < self.cost(&pursuit, None) {
                    w
                } else {
                    pursuit
                }
            }
            _ => pursuit,
        }
    }

    fn point_penalty(&self, p: Point2) -> (f64, Point2) {
        let mut value = 0.0;
        let mut grad = Point2::default();
        for o in &self.ws.obstacles {
            let (depth, normal) = o.penetration(p, self.cfg.inflation);
            if depth > 0.0 {
                value += depth * depth;
                grad = grad - normal * (2.0 * depth);
            }
        }
        let mut edge = |over: f64, axis: Point2| {
            if over > 0.0 {
                value += over * over;
                grad = grad + axis * (2.0 * over);
            }
        };
        edge(-p.x, Point2::new(-1.0, 0.0));
        edge(p.x - self.ws.width, Point2::new(1.0, 0.0));
        edge(-p.y, Point2::new(0.0, -1.0));
        edge(p.y - self.ws.height, Point2::new(0.0, 1.0));
        (value, grad)
    }

    /// Horizon cost; fills `grad` (one entry per control) when provided.
    fn cost(&self, u: &[ControlInput], grad: Option<&mut [ControlInput]>) -> f64 {
        let dt = self.dynamics.dt;
        let k_len = u.len();
        let q = self.cfg.tracking_weight;
        let r = self.cfg.effort_weight;

        let mut pos = Vec::with_capacity(k_len + 1);
        let mut head = Vec::with_capacity(k_len + 1);
        pos.push(self.start.position);
        head.push(self.start.heading);
        for (k, c) in u.iter().enumerate() {
            let (s, co) = head[k].sin_cos();
            pos.push(pos[k] + Point2::new(co, s) * (dt * c.v));
            head.push(head[k] + dt * c.omega);
        }

        let mut cost = 0.0;
        let mut dpos = vec![Point2::default(); k_len + 1];
        for k in 0..=k_len {
            let e = pos[k] - self.target(k);
            cost += q * e.dot(e);
            if k > 0 {
                dpos[k] = dpos[k] + e * (2.0 * q);
            }
        }
        for c in u {
            cost += r * (c.v * c.v + c.omega * c.omega);
        }
        for k in 0..k_len {
            for &s in &PENALTY_SAMPLES {
                let (pv, pg) = self.point_penalty(pos[k].lerp(pos[k + 1], s));
                if pv > 0.0 {
                    cost += self.rho * pv;
                    dpos[k] = dpos[k] + pg * (self.rho * (1.0 - s));
                    dpos[k + 1] = dpos[k + 1] + pg * (self.rho * s);
                }
            }
        }

        if let Some(g) = grad {
            // adjoint sweep through the rollout
            let mut lam_p = dpos[k_len];
            let mut lam_th = 0.0;
            for k in (0..k_len).rev() {
                let (s, co) = head[k].sin_cos();
                g[k] = ControlInput {
                    v: lam_p.dot(Point2::new(co, s)) * dt + 2.0 * r * u[k].v,
                    omega: lam_th * dt + 2.0 * r * u[k].omega,
                };
                lam_th += lam_p.dot(Point2::new(-s, co)) * dt * u[k].v;
                lam_p = lam_p + dpos[k];
            }
        }
        cost
    }

    fn solve(&self, mut u: Vec<ControlInput>) -> Vec<ControlInput> {
        let mut grad = vec![ControlInput::default(); u.len()];
        let mut cost = self.cost(&u, None);
        let base = self.cfg.solver_step;
        let mut step = base;
        for _ in 0..self.cfg.max_solver_iters {
            self.cost(&u, Some(&mut grad));
            let mut improved = false;
            while step > base * 1e-9 {
                let cand: Vec<_> = u
                    .iter()
                    .zip(&grad)
                    .map(|(c, g)| {
                        self.project(ControlInput::new(c.v - step * g.v, c.omega - step * g.omega))
                    })
                    .collect();
                let c = self.cost(&cand, None);
                if c < cost {
                    let gain = cost - c;
                    u = cand;
                    cost = c;
                    improved = gain > 1e-15 * (1.0 + cost);
                    step = (step * 2.0).min(base * 64.0);
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        u
    }
}
