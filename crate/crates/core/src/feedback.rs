//! Simulated human population, bandit feedback and the biased objective.
//!
//! Complainers return 1 when the executed path enters the open ball of radius
//! `r_f` around them. Raters return `min(floor(dist / r_c), k)`, so 0 means
//! the robot came close and `k` means it stayed away. The total feedback is
//! `F = sum(complaints) + lambda * sum(ratings)`; lower is better.

use std::sync::mpsc::{Receiver, Sender};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Trajectory, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Complainer,
    Rater,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Complainer => "complainer",
            Role::Rater => "rater",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Human {
    pub role: Role,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl Human {
    pub fn new(role: Role, position: Point2, radius: f64) -> Self {
        Self {
            role,
            x: position.x,
            y: position.y,
            radius,
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub lambda: f64,
    pub k: u32,
    pub population: Vec<Human>,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k: 5,
            population: Vec::new(),
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self, ws: &Workspace) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("feedback.lambda", "must be positive"));
        }
        if self.k < 1 {
            return Err(Error::invalid("feedback.k", "must be at least 1"));
        }
        for (i, h) in self.population.iter().enumerate() {
            if !(h.radius > 0.0 && h.radius.is_finite()) {
                return Err(Error::invalid(
                    format!("feedback.population[{i}].radius"),
                    "must be positive",
                ));
            }
            if !ws.point_in_free_space(h.position()) {
                return Err(Error::invalid(
                    format!("feedback.population[{i}]"),
                    "must stand in free space",
                ));
            }
        }
        Ok(())
    }

    pub fn count(&self, role: Role) -> usize {
        self.population.iter().filter(|h| h.role == role).count()
    }
}

/// Humans scattered uniformly over the free space.
pub fn random_population(
    ws: &Workspace,
    complainers: usize,
    raters: usize,
    complaint_radius: f64,
    rating_radius: f64,
    seed: u64,
) -> Vec<Human> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |role, radius| loop {
        let p = Point2::new(rng.gen_range(0.0..ws.width), rng.gen_range(0.0..ws.height));
        if ws.point_in_free_space(p) {
            break Human::new(role, p, radius);
        }
    };
    let mut out: Vec<Human> = (0..raters).map(|_| draw(Role::Rater, rating_radius)).collect();
    out.extend((0..complainers).map(|_| draw(Role::Complainer, complaint_radius)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub rho: f64,
    pub tau: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            tau: 0.05,
        }
    }
}

impl ObjectiveConfig {
    pub const UNBIASED: ObjectiveConfig = ObjectiveConfig { rho: 0.0, tau: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.tau >= 0.0) {
            return Err(Error::invalid("objective", "rho and tau must be non-negative"));
        }
        Ok(())
    }
}

/// One labeled sample: what was proposed, what was executed, and its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub query_index: usize,
    pub reference: Trajectory,
    /// The executed trajectory `m(x)`; equals `reference` when tracking failed.
    pub trajectory: Trajectory,
    pub satisfaction: f64,
    pub tracking_residual: f64,
    pub length: f64,
    pub obj: f64,
    /// Tracking failed, so no feedback was collected and `obj` is a penalty.
    #[serde(default)]
    pub penalized: bool,
}

impl FeedbackRecord {
    pub fn recompute_obj(&self, oc: &ObjectiveConfig) -> f64 {
        self.satisfaction + oc.rho * self.tracking_residual + oc.tau * self.length
    }
}

fn expect_role(h: &Human, role: Role) -> Result<()> {
    if h.role != role {
        return Err(Error::RoleMismatch(format!("expected a {role}, got a {}", h.role)));
    }
    Ok(())
}

/// 1 iff the path enters the open ball around the complainer.
pub fn complaint(h: &Human, t: &Trajectory) -> Result<u32> {
    expect_role(h, Role::Complainer)?;
    Ok(u32::from(t.distance_to(h.position()) < h.radius))
}

/// `min(floor(dist / radius), k)`.
pub fn rating(h: &Human, t: &Trajectory, k: u32) -> Result<u32> {
    expect_role(h, Role::Rater)?;
    let level = (t.distance_to(h.position()) / h.radius).floor();
    Ok(if level >= f64::from(k) { k } else { level as u32 })
}

pub fn total_feedback(pop: &FeedbackConfig, t: &Trajectory) -> f64 {
    let mut complaints = 0u32;
    let mut ratings = 0u32;
    for h in &pop.population {
        match h.role {
            Role::Complainer => complaints += complaint(h, t).unwrap_or(0),
            Role::Rater => ratings += rating(h, t, pop.k).unwrap_or(0),
        }
    }
    f64::from(complaints) + pop.lambda * f64::from(ratings)
}

/// Assemble the biased objective from an externally supplied satisfaction.
pub fn objective_from(
    satisfaction: f64,
    oc: &ObjectiveConfig,
    reference: &Trajectory,
    tracked: &Trajectory,
) -> Result<FeedbackRecord> {
    let tracking_residual = reference.residual(tracked)?;
    let length = tracked.length();
    Ok(FeedbackRecord {
        query_index: 0,
        reference: reference.clone(),
        trajectory: tracked.clone(),
        satisfaction,
        tracking_residual,
        length,
        obj: satisfaction + oc.rho * tracking_residual + oc.tau * length,
        penalized: false,
    })
}

/// `Obj = F(m(x)) + rho |x - m(x)| + tau l(m(x))`, with `F` from the simulator.
pub fn objective(
    pop: &FeedbackConfig,
    oc: &ObjectiveConfig,
    reference: &Trajectory,
    tracked: &Trajectory,
) -> Result<FeedbackRecord> {
    objective_from(total_feedback(pop, tracked), oc, reference, tracked)
}

/// Where the optimizer gets its bandit feedback from.
pub trait FeedbackSource {
    /// Total feedback `F` on an executed trajectory.
    fn feedback(&mut self, executed: &Trajectory) -> Result<f64>;
}

/// Deterministic simulated population.
#[derive(Debug, Clone)]
pub struct SimulatedHumans(pub FeedbackConfig);

impl FeedbackSource for SimulatedHumans {
    fn feedback(&mut self, executed: &Trajectory) -> Result<f64> {
        Ok(total_feedback(&self.0, executed))
    }
}

/// Blocking source: publishes each trajectory and waits for a score.
pub struct ChannelFeedback {
    pub outbox: Sender<Trajectory>,
    pub inbox: Receiver<f64>,
    pub timeout: Duration,
}

impl FeedbackSource for ChannelFeedback {
    fn feedback(&mut self, executed: &Trajectory) -> Result<f64> {
        self.outbox
            .send(executed.clone())
            .map_err(|_| Error::Session("feedback consumer hung up".into()))?;
        let f = self
            .inbox
            .recv_timeout(self.timeout)
            .map_err(|e| Error::Session(format!("no feedback received: {e}")))?;
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::invalid("feedback", "must be a non-negative number"));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn line(y: f64) -> Trajectory {
        Trajectory::new(vec![p(0.0, y), p(20.0, y)]).unwrap()
    }

    #[test]
    fn complaint_cases() {
        let h = Human::new(Role::Complainer, p(10.0, 10.0), 1.0);
        assert_eq!(complaint(&h, &line(10.5)).unwrap(), 1);
        assert_eq!(complaint(&h, &line(12.0)).unwrap(), 0);
        assert_eq!(complaint(&h, &line(11.0)).unwrap(), 0);
        let r = Human::new(Role::Rater, p(10.0, 10.0), 1.0);
        assert!(complaint(&r, &line(10.0)).is_err());
    }

    #[test]
    fn rating_cases() {
        let h = Human::new(Role::Rater, p(10.0, 10.0), 1.0);
        assert_eq!(rating(&h, &line(10.3), 5).unwrap(), 0);
        assert_eq!(rating(&h, &line(110.0), 5).unwrap(), 5);
        assert_eq!(rating(&h, &line(12.7), 5).unwrap(), 2);
        let c = Human::new(Role::Complainer, p(10.0, 10.0), 1.0);
        assert!(rating(&c, &line(10.0), 5).is_err());
    }

    #[test]
    fn rating_matches_threshold_table() {
        // level l is returned on [l*r, (l+1)*r) for l < k
        let h = Human::new(Role::Rater, p(10.0, 0.0), 1.5);
        for i in 0..400 {
            let d = i as f64 * 0.025;
            let expected = (0..5u32)
                .rev()
                .find(|&l| d >= f64::from(l) * 1.5)
                .map(|l| if d >= 5.0 * 1.5 { 5 } else { l })
                .unwrap();
            assert_eq!(rating(&h, &line(d), 5).unwrap(), expected, "d={d}");
        }
    }

    #[test]
    fn totals() {
        let empty = FeedbackConfig::default();
        assert_eq!(total_feedback(&empty, &line(3.0)), 0.0);
        let pop = FeedbackConfig {
            lambda: 1.0,
            k: 5,
            population: vec![
                Human::new(Role::Complainer, p(5.0, 5.2), 1.0),
                Human::new(Role::Rater, p(5.0, 8.5), 1.0),
            ],
        };
        assert_eq!(total_feedback(&pop, &line(5.0)), 4.0);
    }

    #[test]
    fn reference_population_matches_per_human_sum() {
        let ws = Workspace::reference_arena();
        let pop = FeedbackConfig {
            lambda: 0.7,
            k: 5,
            population: random_population(&ws, 20, 5, 1.0, 1.0, 4),
        };
        assert_eq!(pop.count(Role::Complainer), 20);
        assert_eq!(pop.count(Role::Rater), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let pts = (0..6)
                .map(|_| p(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)))
                .collect();
            let t = Trajectory::new(pts).unwrap();
            // independent re-summation straight from the definitions
            let mut expected = 0.0;
            for h in &pop.population {
                let d = t
                    .segments()
                    .map(|(a, b)| crate::geometry::point_segment_distance(h.position(), a, b))
                    .fold(f64::INFINITY, f64::min);
                expected += match h.role {
                    Role::Complainer => f64::from(u8::from(d < h.radius)),
                    Role::Rater => 0.7 * (d / h.radius).floor().min(5.0),
                };
            }
            assert!((total_feedback(&pop, &t) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_arithmetic() {
        let empty = FeedbackConfig::default();
        let t = line(3.0);
        let r = objective(&empty, &ObjectiveConfig { rho: 1.0, tau: 0.0 }, &t, &t).unwrap();
        assert_eq!(r.obj, 0.0);

        let reference = Trajectory::new(vec![p(0.0, 0.0), p(30.0, 2.0)]).unwrap();
        let tracked = Trajectory::new(vec![p(0.0, 0.0), p(30.0, 0.0)]).unwrap();
        let r = objective_from(
            3.0,
            &ObjectiveConfig {
                rho: 0.1,
                tau: 0.05,
            },
            &reference,
            &tracked,
        )
        .unwrap();
        assert!((r.obj - 4.7).abs() < 1e-12);
        let r = objective_from(3.0, &ObjectiveConfig::UNBIASED, &reference, &tracked).unwrap();
        assert_eq!(r.obj, 3.0);
    }

    #[test]
    fn channel_source_times_out() {
        let (tx, _rx_traj) = std::sync::mpsc::channel();
        let (_tx_f, rx) = std::sync::mpsc::channel::<f64>();
        let mut src = ChannelFeedback {
            outbox: tx,
            inbox: rx,
            timeout: Duration::from_millis(10),
        };
        assert!(src.feedback(&line(1.0)).is_err());
    }

    #[test]
    fn channel_source_round_trip() {
        let (tx, rx_traj) = std::sync::mpsc::channel();
        let (tx_f, rx) = std::sync::mpsc::channel::<f64>();
        let human = std::thread::spawn(move || {
            let t: Trajectory = rx_traj.recv().unwrap();
            tx_f.send(t.length()).unwrap();
        });
        let mut src = ChannelFeedback {
            outbox: tx,
            inbox: rx,
            timeout: Duration::from_secs(5),
        };
        assert_eq!(src.feedback(&line(1.0)).unwrap(), 20.0);
        human.join().unwrap();
    }

    proptest! {
        #[test]
        fn rating_monotone_in_distance(d1 in 0.0..20.0f64, d2 in 0.0..20.0f64) {
            let h = Human::new(Role::Rater, p(10.0, 0.0), 1.3);
            let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(rating(&h, &line(near), 5).unwrap() <= rating(&h, &line(far), 5).unwrap());
        }

        #[test]
        fn zero_lambda_counts_only_complaints(y in 0.0..20.0f64, seed in 0u64..50) {
            let ws = Workspace::reference_arena();
            let mut pop = FeedbackConfig {
                lambda: 1.0,
                k: 5,
                population: random_population(&ws, 20, 5, 1.0, 1.0, seed),
            };
            let full = total_feedback(&pop, &line(y));
            pop.lambda = 0.0;
            let complaints_only = total_feedback(&pop, &line(y));
            prop_assert!(complaints_only <= full);
            prop_assert_eq!(complaints_only, complaints_only.trunc());
            prop_assert!(complaints_only <= pop.count(Role::Complainer) as f64);
        }
    }
}
