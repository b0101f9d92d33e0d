//! Plain RRT from start to goal, post-processed into a fixed-length,
//! dynamically feasible waypoint sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{verify_feasible, DynamicsConfig};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Trajectory, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrtConfig {
    pub step_size: f64,
    pub max_nodes: usize,
    pub goal_bias: f64,
    /// Number of segments `T` in the resampled output.
    pub resample_steps: usize,
    /// Trees grown per call before giving up on post-processing.
    pub max_attempts: usize,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_nodes: 4000,
            goal_bias: 0.05,
            resample_steps: 20,
            max_attempts: 20,
        }
    }
}

impl RrtConfig {
    pub fn validate(&self, dynamics: &DynamicsConfig) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= dynamics.max_step()) {
            return Err(Error::invalid(
                "rrt.step_size",
                format!("must be in (0, v_max*dt = {}]", dynamics.max_step()),
            ));
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err(Error::invalid("rrt.goal_bias", "must be in [0, 1]"));
        }
        if self.resample_steps == 0 {
            return Err(Error::invalid("rrt.resample_steps", "must be at least 1"));
        }
        if self.max_nodes < 2 || self.max_attempts == 0 {
            return Err(Error::invalid("rrt.max_nodes", "must allow at least one tree"));
        }
        Ok(())
    }
}

/// One RRT path for `seed`, resampled to `resample_steps + 1` waypoints.
pub fn rrt_generate(
    ws: &Workspace,
    dynamics: &DynamicsConfig,
    cfg: &RrtConfig,
    seed: u64,
) -> Result<Trajectory> {
    if !ws.point_in_free_space(ws.start) || !ws.point_in_free_space(ws.goal) {
        return Err(Error::invalid("workspace", "start and goal must be free"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let path = grow_tree(ws, cfg, &mut rng)?;
        if let Some(t) = refine(path, ws, dynamics, cfg, &mut rng) {
            return Ok(t);
        }
    }
    Err(Error::PlanningFailed {
        nodes: cfg.max_nodes,
    })
}

fn grow_tree(ws: &Workspace, cfg: &RrtConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Point2>> {
    let mut nodes = vec![ws.start];
    let mut parent = vec![usize::MAX];
    while nodes.len() < cfg.max_nodes {
        let sample = if rng.gen::<f64>() < cfg.goal_bias {
            ws.goal
        } else {
            Point2::new(rng.gen_range(0.0..ws.width), rng.gen_range(0.0..ws.height))
        };
        let (near, dist) = nodes
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.dist(sample)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if dist <= 1e-12 {
            continue;
        }
        let new = if dist <= cfg.step_size {
            sample
        } else {
            nodes[near].lerp(sample, cfg.step_size / dist)
        };
        if ws.segment_collides(nodes[near], new) {
            continue;
        }
        nodes.push(new);
        parent.push(near);
        let last = nodes.len() - 1;
        if new.dist(ws.goal) <= cfg.step_size && !ws.segment_collides(new, ws.goal) {
            let mut path = vec![ws.goal];
            let mut i = last;
            while i != usize::MAX {
                path.push(nodes[i]);
                i = parent[i];
            }
            path.reverse();
            if path[path.len() - 2] == ws.goal {
                path.pop();
            }
            return Ok(path);
        }
    }
    Err(Error::PlanningFailed {
        nodes: cfg.max_nodes,
    })
}

/// Smooth the raw tree path until its resampled form is safe and feasible.
///
/// Each round applies one random shortcut and one Laplacian relaxation pass,
/// so the result keeps the tree's large-scale route.
fn refine(
    mut path: Vec<Point2>,
    ws: &Workspace,
    dynamics: &DynamicsConfig,
    cfg: &RrtConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Trajectory> {
    for _ in 0..200 {
        if path.len() >= 2 {
            let candidate = Trajectory::new(path.clone()).ok()?.resample(cfg.resample_steps);
            if ws.trajectory_collision_free(&candidate) && verify_feasible(&candidate, dynamics) {
                return Some(candidate);
            }
        }
        if path.len() > 2 {
            let i = rng.gen_range(0..path.len() - 2);
            let j = rng.gen_range(i + 2..path.len());
            if !ws.segment_collides(path[i], path[j]) {
                path.drain(i + 1..j);
            }
        }
        relax(&mut path, ws);
        densify(&mut path, cfg.step_size);
    }
    None
}

fn relax(path: &mut [Point2], ws: &Workspace) {
    for i in 1..path.len().saturating_sub(1) {
        let target = path[i].lerp((path[i - 1] + path[i + 1]) * 0.5, 0.5);
        if !ws.segment_collides(path[i - 1], target) && !ws.segment_collides(target, path[i + 1]) {
            path[i] = target;
        }
    }
}

/// Split long edges so relaxation keeps acting on shortcuts.
fn densify(path: &mut Vec<Point2>, spacing: f64) {
    let mut out = Vec::with_capacity(path.len());
    for w in path.windows(2) {
        out.push(w[0]);
        let n = (w[0].dist(w[1]) / spacing).ceil() as usize;
        for k in 1..n {
            out.push(w[0].lerp(w[1], k as f64 / n as f64));
        }
    }
    if let Some(&last) = path.last() {
        out.push(last);
    }
    *path = out;
}
