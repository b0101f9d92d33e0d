//! Planar workspace geometry: square obstacles, collision predicates and
//! polyline distances.
//!
//! Obstacles are closed sets and the workspace rectangle `[0, width] x [0,
//! height]` is the whole domain, so leaving it counts as a collision. All
//! predicates share the tolerance [`GEOM_EPS`].

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Predicate tolerance for all geometric tests.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Point2, s: f64) -> Point2 {
        self + (other - self) * s
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned square obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Point2,
    pub half_extent: f64,
}

impl Obstacle {
    pub fn new(center: Point2, half_extent: f64) -> Self {
        Self {
            center,
            half_extent,
        }
    }

    /// Closed containment with an optional inflation margin.
    pub fn contains(&self, p: Point2, inflate: f64) -> bool {
        let h = self.half_extent + inflate + GEOM_EPS;
        (p.x - self.center.x).abs() <= h && (p.y - self.center.y).abs() <= h
    }

    /// Depth of `p` inside the square inflated by `inflate`, with the
    /// direction (unit axis) that pushes it out fastest. Zero outside.
    pub fn penetration(&self, p: Point2, inflate: f64) -> (f64, Point2) {
        let h = self.half_extent + inflate;
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let px = h - dx.abs();
        let py = h - dy.abs();
        if px <= 0.0 || py <= 0.0 {
            return (0.0, Point2::default());
        }
        if px <= py {
            (px, Point2::new(if dx >= 0.0 { 1.0 } else { -1.0 }, 0.0))
        } else {
            (py, Point2::new(0.0, if dy >= 0.0 { 1.0 } else { -1.0 }))
        }
    }

    /// Exact closed segment vs. closed box test (slab clipping).
    pub fn intersects_segment(&self, a: Point2, b: Point2) -> bool {
        let h = self.half_extent + GEOM_EPS;
        let lo = [self.center.x - h, self.center.y - h];
        let hi = [self.center.x + h, self.center.y + h];
        let origin = [a.x, a.y];
        let dir = [b.x - a.x, b.y - a.y];
        let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
        for axis in 0..2 {
            if dir[axis].abs() < 1e-15 {
                if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                    return false;
                }
            } else {
                let inv = 1.0 / dir[axis];
                let mut ta = (lo[axis] - origin[axis]) * inv;
                let mut tb = (hi[axis] - origin[axis]) * inv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Rectangular domain `[0, width] x [0, height]` with square obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<Obstacle>,
    pub start: Point2,
    pub goal: Point2,
}

impl Workspace {
    pub fn new(
        width: f64,
        height: f64,
        obstacles: Vec<Obstacle>,
        start: Point2,
        goal: Point2,
    ) -> Result<Self> {
        let ws = Self {
            width,
            height,
            obstacles,
            start,
            goal,
        };
        ws.validate()?;
        Ok(ws)
    }

    /// The 20x20 arena with two unit-half-extent squares at (5,8) and (11,13).
    pub fn reference_arena() -> Self {
        Self {
            width: 20.0,
            height: 20.0,
            obstacles: vec![
                Obstacle::new(Point2::new(5.0, 8.0), 1.0),
                Obstacle::new(Point2::new(11.0, 13.0), 1.0),
            ],
            start: Point2::new(0.0, 0.0),
            goal: Point2::new(20.0, 20.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::invalid("workspace.width", "must be positive"));
        }
        if !(self.height > 0.0 && self.height.is_finite()) {
            return Err(Error::invalid("workspace.height", "must be positive"));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.half_extent > 0.0) || !o.center.is_finite() {
                return Err(Error::invalid(
                    format!("workspace.obstacles[{i}].half_extent"),
                    "must be positive",
                ));
            }
            let h = o.half_extent;
            if o.center.x - h < 0.0
                || o.center.y - h < 0.0
                || o.center.x + h > self.width
                || o.center.y + h > self.height
            {
                return Err(Error::invalid(
                    format!("workspace.obstacles[{i}]"),
                    "must lie inside the workspace rectangle",
                ));
            }
        }
        if !self.point_in_free_space(self.start) {
            return Err(Error::invalid("workspace.start", "not in free space"));
        }
        if !self.point_in_free_space(self.goal) {
            return Err(Error::invalid("workspace.goal", "not in free space"));
        }
        Ok(())
    }

    pub fn inside_bounds(&self, p: Point2) -> bool {
        p.x >= -GEOM_EPS
            && p.y >= -GEOM_EPS
            && p.x <= self.width + GEOM_EPS
            && p.y <= self.height + GEOM_EPS
    }

    /// Inside the rectangle and strictly outside every obstacle.
    pub fn point_in_free_space(&self, p: Point2) -> bool {
        p.is_finite()
            && self.inside_bounds(p)
            && !self.obstacles.iter().any(|o| o.contains(p, 0.0))
    }

    /// True iff the closed segment touches an obstacle or leaves the domain.
    pub fn segment_collides(&self, a: Point2, b: Point2) -> bool {
        // the rectangle is convex, so the segment stays inside iff both ends do
        if !self.inside_bounds(a) || !self.inside_bounds(b) || !a.is_finite() || !b.is_finite() {
            return true;
        }
        self.obstacles.iter().any(|o| o.intersects_segment(a, b))
    }

    pub fn trajectory_collision_free(&self, t: &Trajectory) -> bool {
        t.segments().all(|(a, b)| !self.segment_collides(a, b))
    }

    /// Map workspace coordinates into `[0,1]^2`.
    pub fn normalize(&self, p: Point2) -> Point2 {
        Point2::new(p.x / self.width, p.y / self.height)
    }

    pub fn denormalize(&self, p: Point2) -> Point2 {
        Point2::new(p.x * self.width, p.y * self.height)
    }

    /// Short stable digest of the geometry, recorded in corpus headers.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut push = |v: f64| hasher.update(v.to_bits().to_le_bytes());
        push(self.width);
        push(self.height);
        push(self.start.x);
        push(self.start.y);
        push(self.goal.x);
        push(self.goal.y);
        for o in &self.obstacles {
            push(o.center.x);
            push(o.center.y);
            push(o.half_extent);
        }
        let out = hasher.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ordered waypoint sequence `x_0, ..., x_T` with `T >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    waypoints: Vec<Point2>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Point2>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::invalid(
                "trajectory",
                format!("needs at least 2 waypoints, got {}", waypoints.len()),
            ));
        }
        if waypoints.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "trajectory waypoint".into(),
            });
        }
        Ok(Self { waypoints })
    }

    /// Straight line from `a` to `b` with `steps` equal segments.
    pub fn straight(a: Point2, b: Point2, steps: usize) -> Self {
        let steps = steps.max(1);
        let waypoints = (0..=steps)
            .map(|i| a.lerp(b, i as f64 / steps as f64))
            .collect();
        Self { waypoints }
    }

    /// Rebuild from interleaved `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::invalid("trajectory", "odd flattened length"));
        }
        Self::new(
            flat.chunks_exact(2)
                .map(|c| Point2::new(c[0], c[1]))
                .collect(),
        )
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// Flattened coordinates divided by the workspace extent.
    pub fn normalized(&self, ws: &Workspace) -> Vec<f64> {
        self.waypoints
            .iter()
            .flat_map(|&p| {
                let q = ws.normalize(p);
                [q.x, q.y]
            })
            .collect()
    }

    pub fn from_normalized(flat: &[f64], ws: &Workspace) -> Result<Self> {
        let t = Self::from_flat(flat)?;
        Ok(Self {
            waypoints: t.waypoints.into_iter().map(|p| ws.denormalize(p)).collect(),
        })
    }

    pub fn waypoints(&self) -> &[Point2] {
        &self.waypoints
    }

    pub fn waypoints_mut(&mut self) -> &mut [Point2] {
        &mut self.waypoints
    }

    /// Number of segments `T`.
    pub fn steps(&self) -> usize {
        self.waypoints.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.waypoints.len() * 2
    }

    pub fn first(&self) -> Point2 {
        self.waypoints[0]
    }

    pub fn last(&self) -> Point2 {
        self.waypoints[self.waypoints.len() - 1]
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        self.waypoints.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| a.dist(b)).sum()
    }

    /// Euclidean distance from `p` to the polyline (not just its vertices).
    pub fn distance_to(&self, p: Point2) -> f64 {
        self.segments()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Euclidean norm of the flattened difference.
    pub fn residual(&self, other: &Trajectory) -> Result<f64> {
        if self.waypoints.len() != other.waypoints.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .waypoints
            .iter()
            .zip(&other.waypoints)
            .map(|(a, b)| {
                let d = *a - *b;
                d.dot(d)
            })
            .sum::<f64>()
            .sqrt())
    }

    /// Resample by arc length to exactly `steps + 1` waypoints.
    pub fn resample(&self, steps: usize) -> Trajectory {
        let steps = steps.max(1);
        let total = self.length();
        if total <= 0.0 {
            return Trajectory {
                waypoints: vec![self.first(); steps + 1],
            };
        }
        let mut out = Vec::with_capacity(steps + 1);
        out.push(self.first());
        let mut seg = 0;
        let mut seg_start = 0.0;
        let pts = &self.waypoints;
        for i in 1..steps {
            let target = total * i as f64 / steps as f64;
            loop {
                let len = pts[seg].dist(pts[seg + 1]);
                if seg_start + len >= target || seg + 2 == pts.len() {
                    let s = if len > 0.0 {
                        ((target - seg_start) / len).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    out.push(pts[seg].lerp(pts[seg + 1], s));
                    break;
                }
                seg_start += len;
                seg += 1;
            }
        }
        out.push(self.last());
        Trajectory { waypoints: out }
    }
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 <= 0.0 {
        return p.dist(a);
    }
    let s = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * s)
}

pub fn point_in_free_space(p: Point2, w: &Workspace) -> bool {
    w.point_in_free_space(p)
}

pub fn segment_collides(a: Point2, b: Point2, w: &Workspace) -> bool {
    w.segment_collides(a, b)
}

pub fn trajectory_collision_free(t: &Trajectory, w: &Workspace) -> bool {
    w.trajectory_collision_free(t)
}

pub fn dist_point_to_trajectory(p: Point2, t: &Trajectory) -> f64 {
    t.distance_to(p)
}

pub fn trajectory_length(t: &Trajectory) -> f64 {
    t.length()
}
