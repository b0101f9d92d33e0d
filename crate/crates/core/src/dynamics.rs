//! Discrete-time unicycle model and waypoint feasibility.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Trajectory};

/// Tolerance used when checking trajectories against the input bounds.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Displacements shorter than this carry no heading information.
const STATIONARY: f64 = 1e-7;

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Point2,
    pub heading: f64,
}

impl RobotState {
    pub fn new(position: Point2, heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

impl ControlInput {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub dt: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.5,
            v_max: 4.0,
            omega_max: PI,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dynamics.dt", self.dt),
            ("dynamics.v_max", self.v_max),
            ("dynamics.omega_max", self.omega_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Longest distance covered in one step.
    pub fn max_step(&self) -> f64 {
        self.v_max * self.dt
    }

    /// Largest heading change in one step.
    pub fn max_turn(&self) -> f64 {
        self.omega_max * self.dt
    }

    pub fn admits(&self, u: ControlInput) -> bool {
        u.v.abs() <= self.v_max && u.omega.abs() <= self.omega_max
    }
}

/// A motion model mapping state and input to the next state.
pub trait Dynamics {
    fn step(&self, q: RobotState, u: ControlInput) -> Result<RobotState>;
}

/// Euler-discretized unicycle: `q' = q + dt [v cos th, v sin th, w]`.
#[derive(Debug, Clone, Copy)]
pub struct Unicycle(pub DynamicsConfig);

impl Dynamics for Unicycle {
    fn step(&self, q: RobotState, u: ControlInput) -> Result<RobotState> {
        step(q, u, &self.0)
    }
}

/// One unicycle step, rejecting inputs outside the feasible set.
pub fn step(q: RobotState, u: ControlInput, cfg: &DynamicsConfig) -> Result<RobotState> {
    if !cfg.admits(u) {
        return Err(Error::ControlOutOfBounds {
            v: u.v,
            omega: u.omega,
        });
    }
    Ok(step_unchecked(q, u, cfg.dt))
}

pub(crate) fn step_unchecked(q: RobotState, u: ControlInput, dt: f64) -> RobotState {
    let (s, c) = q.heading.sin_cos();
    RobotState {
        position: Point2::new(q.position.x + dt * u.v * c, q.position.y + dt * u.v * s),
        heading: wrap_angle(q.heading + dt * u.omega),
    }
}

/// Whether some forward-driving input sequence reproduces the waypoints.
///
/// Waypoints carry no heading, so turn rates are checked on the directions of
/// consecutive non-zero displacements. Stationary steps may rotate in place,
/// which widens the allowed turn by one step's worth each.
pub fn verify_feasible(t: &Trajectory, cfg: &DynamicsConfig) -> bool {
    let max_step = cfg.max_step() + FEASIBILITY_TOL;
    let mut last_dir: Option<(usize, f64)> = None;
    for (i, (a, b)) in t.segments().enumerate() {
        let d = b - a;
        let len = d.norm();
        if len > max_step {
            return false;
        }
        if len <= STATIONARY {
            continue;
        }
        let dir = d.y.atan2(d.x);
        if let Some((j, prev)) = last_dir {
            let allowed = (i - j) as f64 * cfg.max_turn() + FEASIBILITY_TOL;
            if wrap_angle(dir - prev).abs() > allowed {
                return false;
            }
        }
        last_dir = Some((i, dir));
    }
    true
}
