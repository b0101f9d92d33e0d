//! Latent-space Bayesian optimization with online autoencoder updates.
//!
//! [`Optimizer`] is a step-wise state machine. It always holds either one
//! pending candidate (an executed, safe trajectory awaiting a feedback score)
//! or nothing, once the query budget is spent. [`run`] drives it from a
//! [`FeedbackSource`]; the service drives it from HTTP requests.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{verify_feasible, DynamicsConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feedback::{objective_from, FeedbackRecord, FeedbackSource, ObjectiveConfig};
use crate::geometry::{Trajectory, Workspace};
use crate::gp::{GpHyperparams, GpModel, Standardizer};
use crate::latent::{joint_gradients, LatentModel};
use crate::planners::{mpc_track, MpcConfig};
use crate::seeds;

/// Keeps proposals strictly inside the open unit box.
const BOX_EPS: f64 = 1e-6;
/// Relative widening of the anchor bounding box on each side.
const SEARCH_MARGIN: f64 = 0.1;
const SEARCH_MIN_WIDTH: f64 = 0.02;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Random latent space, updated online.
    Supervised,
    /// Pretrained latent space, frozen.
    Unsupervised,
    /// Pretrained latent space, updated online.
    Semisupervised,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Supervised, Mode::Unsupervised, Mode::Semisupervised];

    pub fn pretrained(self) -> bool {
        self != Mode::Supervised
    }

    pub fn updates(self) -> bool {
        self != Mode::Unsupervised
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
            Mode::Semisupervised => "semisupervised",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            "semisupervised" => Ok(Mode::Semisupervised),
            _ => Err(Error::invalid(
                "mode",
                format!("`{s}` is not one of supervised, unsupervised, semisupervised"),
            )),
        }
    }
}

/// Which labeled points enter the NMLL term of the online update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmllWindow {
    /// The most recent `n_m` records.
    #[default]
    Recent,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    pub kappa: f64,
    pub n_query: usize,
    pub n_m: usize,
    pub n_e: usize,
    pub alpha_e: f64,
    pub alpha_d: f64,
    pub alpha_g: f64,
    pub acq_restarts: usize,
    pub acq_iters: usize,
    pub nmll_window: NmllWindow,
    /// Standardize GP targets before fitting.
    pub standardize: bool,
    /// Initial GP hyperparameters.
    pub gp: GpHyperparams,
    pub mode: Mode,
    pub bias_enabled: bool,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            n_query: 50,
            n_m: 5,
            n_e: 20,
            alpha_e: 1e-3,
            alpha_d: 1e-3,
            alpha_g: 1e-2,
            acq_restarts: 32,
            acq_iters: 50,
            nmll_window: NmllWindow::Recent,
            standardize: true,
            gp: GpHyperparams::default(),
            mode: Mode::Semisupervised,
            bias_enabled: true,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("bo.kappa", "must be non-negative"));
        }
        if self.n_m == 0 {
            return Err(Error::invalid("bo.n_m", "must be at least 1"));
        }
        if self.n_query > 0 && self.n_m > self.n_query {
            return Err(Error::invalid("bo.n_m", "must not exceed bo.n_query"));
        }
        for (name, v) in [
            ("bo.alpha_e", self.alpha_e),
            ("bo.alpha_d", self.alpha_d),
            ("bo.alpha_g", self.alpha_g),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be non-negative"));
            }
        }
        if self.acq_restarts == 0 {
            return Err(Error::invalid("bo.acq_restarts", "must be at least 1"));
        }
        self.gp.validate()
    }
}

/// Environment and fixed components shared by every query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub workspace: Workspace,
    pub dynamics: DynamicsConfig,
    pub mpc: MpcConfig,
    pub objective: ObjectiveConfig,
}

impl Problem {
    /// Objective weights in force for `bo`, zero when the bias is off.
    pub fn objective_for(&self, bo: &BoConfig) -> ObjectiveConfig {
        if bo.bias_enabled {
            self.objective
        } else {
            ObjectiveConfig::UNBIASED
        }
    }
}

/// `mu(z) - kappa sqrt(var(z))`; smaller is more promising.
pub fn acquisition(gp: &GpModel, z: &[f64], kappa: f64) -> f64 {
    let (mu, var) = gp.posterior(z);
    mu - kappa * var.sqrt()
}

/// Axis-aligned region of the latent cube searched by the acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SearchBox {
    /// The open unit cube, shrunk by a hair so sigmoid codes stay attainable.
    pub fn unit(d: usize) -> Self {
        Self {
            lo: vec![BOX_EPS; d],
            hi: vec![1.0 - BOX_EPS; d],
        }
    }

    /// Bounding box of `codes`, widened on each side by `margin` times its
    /// extent (at least `min_width / 2`), clipped to the unit cube.
    pub fn around(codes: &[Vec<f64>], margin: f64, min_width: f64) -> Self {
        let d = codes[0].len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for z in codes {
            for c in 0..d {
                lo[c] = lo[c].min(z[c]);
                hi[c] = hi[c].max(z[c]);
            }
        }
        for c in 0..d {
            let pad = (margin * (hi[c] - lo[c])).max(0.5 * min_width);
            lo[c] = (lo[c] - pad).max(BOX_EPS);
            hi[c] = (hi[c] + pad).min(1.0 - BOX_EPS);
        }
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| if b > a { rng.gen_range(a..b) } else { a })
            .collect()
    }
}

/// Approximate acquisition minimizer over the open unit box. Returns the
/// point and its acquisition value.
pub fn propose(gp: &GpModel, cfg: &BoConfig, seed: u64, exec: Exec) -> (Vec<f64>, f64) {
    propose_in(gp, cfg, seed, exec, &SearchBox::unit(gp.dim()))
}

/// [`propose`] restricted to `bounds`.
pub fn propose_in(
    gp: &GpModel,
    cfg: &BoConfig,
    seed: u64,
    exec: Exec,
    bounds: &SearchBox,
) -> (Vec<f64>, f64) {
    let mut rng = seeds::rng(seed, seeds::ACQUISITION, 0);
    let starts: Vec<Vec<f64>> = (0..cfg.acq_restarts).map(|_| bounds.sample(&mut rng)).collect();
    let f = |z: &[f64]| acquisition(gp, z, cfg.kappa);
    let refined = exec.map(&starts, |s| coordinate_search(&f, s.clone(), cfg.acq_iters, bounds));
    refined
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(i.cmp(j)))
        .map(|(_, r)| r)
        .expect("at least one restart")
}

/// Coordinate-wise golden-section descent in a window that shrinks whenever a
/// full sweep fails to improve. Only improving moves are accepted.
fn coordinate_search(
    f: &impl Fn(&[f64]) -> f64,
    mut z: Vec<f64>,
    iters: usize,
    bounds: &SearchBox,
) -> (Vec<f64>, f64) {
    let mut best = f(&z);
    let mut window = 0.25;
    for _ in 0..iters {
        let mut improved = false;
        for c in 0..z.len() {
            let lo = (z[c] - window).max(bounds.lo[c]);
            let hi = (z[c] + window).min(bounds.hi[c]);
            if hi <= lo {
                continue;
            }
            let (x, v) = golden_section(
                |t| {
                    let mut probe = z.clone();
                    probe[c] = t;
                    f(&probe)
                },
                lo,
                hi,
                10,
            );
            if v < best {
                z[c] = x;
                best = v;
                improved = true;
            }
        }
        if !improved {
            window *= 0.5;
            if window < 1e-5 {
                break;
            }
        }
    }
    (z, best)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, evals: usize) -> (f64, f64) {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..evals {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Summary of one online parameter-update round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRound {
    pub query_index: usize,
    pub epochs: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub hyper: GpHyperparams,
    /// Set when the round was abandoned and the state left unchanged.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub latent: LatentModel,
    /// Current GP hyperparameters; the GP itself is refitted on demand.
    pub hyper: GpHyperparams,
    pub labeled: Vec<FeedbackRecord>,
    /// Index into `labeled` of the lowest objective so far.
    pub best: usize,
    pub query_index: usize,
    pub updates: Vec<UpdateRound>,
}

impl RunState {
    pub fn best(&self) -> &FeedbackRecord {
        &self.labeled[self.best]
    }

    /// Normalized executed trajectories and objectives of `records`.
    fn training_data(records: &[FeedbackRecord], ws: &Workspace) -> (Vec<Vec<f64>>, Vec<f64>) {
        records
            .iter()
            .map(|r| (r.trajectory.normalized(ws), r.obj))
            .unzip()
    }

    /// GP on the current encodings of every labeled record.
    pub fn fit_gp(&self, ws: &Workspace, standardize: bool) -> Result<GpModel> {
        let (xs, ys) = Self::training_data(&self.labeled, ws);
        let zs = xs
            .iter()
            .map(|x| self.latent.encode(x))
            .collect::<Result<Vec<_>>>()?;
        GpModel::fit(self.hyper, zs, ys, standardize)
    }

    /// Best-so-far objective after each query.
    pub fn best_obj_series(&self) -> Vec<f64> {
        running_min(self.labeled.iter().map(|r| r.obj))
    }

    /// Lowest feedback `F` among executed (non-penalized) queries so far.
    pub fn best_f_series(&self) -> Vec<f64> {
        running_min(
            self.labeled
                .iter()
                .map(|r| if r.penalized { f64::INFINITY } else { r.satisfaction }),
        )
    }
}

fn running_min(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .map(|v| {
            best = best.min(v);
            best
        })
        .collect()
}

/// Joint update of the encoder, decoder and GP
/// hyperparameters, guarded by step halving. Non-finite gradients or a
/// singular kernel abandon the round without touching `state`.
pub fn parameter_update(state: &mut RunState, problem: &Problem, cfg: &BoConfig) -> UpdateRound {
    let ws = &problem.workspace;
    let (xs, ys) = RunState::training_data(&state.labeled, ws);
    let from = match cfg.nmll_window {
        NmllWindow::Recent => xs.len().saturating_sub(cfg.n_m),
        NmllWindow::All => 0,
    };
    let (wx, wy) = (&xs[from..], &ys[from..]);
    let st = if cfg.standardize {
        Standardizer::fit(wy)
    } else {
        Standardizer::IDENTITY
    };
    let mut latent = state.latent.clone();
    let mut hyper = state.hyper;
    let round = |epochs, before, after, hyper, aborted| UpdateRound {
        query_index: state.query_index,
        epochs,
        loss_before: before,
        loss_after: after,
        hyper,
        aborted,
    };
    let mut g = match joint_gradients(&latent, &xs, wx, wy, hyper, st) {
        Ok(g) if g.is_finite() => g,
        Ok(_) => return round(0, f64::NAN, f64::NAN, state.hyper, Some("non-finite gradient".into())),
        Err(e) => return round(0, f64::NAN, f64::NAN, state.hyper, Some(e.to_string())),
    };
    let before = g.total();
    let mut epochs = 0;
    'epochs: for _ in 0..cfg.n_e {
        let mut scale = 1.0;
        for _ in 0..=5 {
            let cand_latent = latent.stepped(&g.latent, scale * cfg.alpha_e, scale * cfg.alpha_d);
            let p = hyper.log_params();
            let cand_hyper = hyper.with_log_params([
                p[0] - scale * cfg.alpha_g * g.log_sigma_f,
                p[1] - scale * cfg.alpha_g * g.log_length_scale,
            ]);
            match joint_gradients(&cand_latent, &xs, wx, wy, cand_hyper, st) {
                Ok(cg) if !cg.is_finite() => {
                    return round(epochs, before, before, state.hyper, Some("non-finite gradient".into()));
                }
                Ok(cg) if cg.total() <= g.total() => {
                    latent = cand_latent;
                    hyper = cand_hyper;
                    g = cg;
                    epochs += 1;
                    continue 'epochs;
                }
                _ => scale *= 0.5,
            }
        }
        break;
    }
    state.latent = latent;
    state.hyper = hyper;
    round(epochs, before, g.total(), hyper, None)
}

/// A trajectory awaiting feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub query_index: usize,
    pub z: Vec<f64>,
    pub reference: Trajectory,
    pub executed: Trajectory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    pub problem: Problem,
    pub cfg: BoConfig,
    state: Option<RunState>,
    latent0: LatentModel,
    /// Unlabeled trajectories whose encodings, with the labeled ones, bound
    /// the acquisition search. Empty means the whole latent cube.
    anchors: Vec<Vec<f64>>,
    pending: Option<Candidate>,
    /// Penalized proposals accumulated before the first evaluated query.
    early: Vec<FeedbackRecord>,
    #[serde(skip)]
    exec: Exec,
}

impl Optimizer {
    /// Start a run. `latent` must be pretrained for the pretrained modes;
    /// `anchors` are normalized unlabeled trajectories (may be empty).
    pub fn new(
        problem: Problem,
        cfg: BoConfig,
        latent: LatentModel,
        anchors: Vec<Vec<f64>>,
        exec: Exec,
    ) -> Result<Self> {
        cfg.validate()?;
        problem.workspace.validate()?;
        problem.dynamics.validate()?;
        problem.mpc.validate()?;
        problem.objective.validate()?;
        if latent.ambient_dim() % 2 != 0 || latent.ambient_dim() < 4 {
            return Err(Error::invalid(
                "latent.ambient_dim",
                "must be 2(T+1) for some T >= 1",
            ));
        }
        let mut opt = Self {
            problem,
            cfg,
            state: None,
            latent0: latent,
            anchors,
            pending: None,
            early: Vec::new(),
            exec,
        };
        opt.advance(0)?;
        Ok(opt)
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn pending(&self) -> Option<&Candidate> {
        self.pending.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.pending.is_none()
    }

    /// Labeled history, including penalized queries.
    pub fn records(&self) -> &[FeedbackRecord] {
        match &self.state {
            Some(s) => &s.labeled,
            None => &self.early,
        }
    }

    pub fn state(&self) -> Option<&RunState> {
        self.state.as_ref()
    }

    pub fn into_state(self) -> Option<RunState> {
        self.state
    }

    fn latent(&self) -> &LatentModel {
        self.state.as_ref().map_or(&self.latent0, |s| &s.latent)
    }

    /// Record feedback `f` for the pending candidate and move on to the next
    /// query that needs feedback.
    pub fn submit(&mut self, f: f64) -> Result<()> {
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::invalid("feedback", "must be a non-negative number"));
        }
        let c = self
            .pending
            .take()
            .ok_or_else(|| Error::Session("no candidate is pending".into()))?;
        let oc = self.problem.objective_for(&self.cfg);
        let mut rec = objective_from(f, &oc, &c.reference, &c.executed)?;
        rec.query_index = c.query_index;
        self.push(rec);
        self.after_query(c.query_index)
    }

    fn push(&mut self, rec: FeedbackRecord) {
        match &mut self.state {
            Some(s) => {
                s.labeled.push(rec);
                let last = s.labeled.len() - 1;
                if s.labeled[last].obj < s.labeled[s.best].obj {
                    s.best = last;
                }
                s.query_index = s.labeled[last].query_index;
            }
            None if rec.penalized => self.early.push(rec),
            None => {
                let mut labeled = std::mem::take(&mut self.early);
                labeled.push(rec);
                let best = argmin_obj(&labeled);
                self.state = Some(RunState {
                    latent: self.latent0.clone(),
                    hyper: self.cfg.gp,
                    query_index: labeled.len() - 1,
                    labeled,
                    best,
                    updates: Vec::new(),
                });
            }
        }
    }

    fn after_query(&mut self, i: usize) -> Result<()> {
        if i > 0 && i % self.cfg.n_m == 0 && self.cfg.mode.updates() {
            if let Some(state) = &mut self.state {
                let round = parameter_update(state, &self.problem, &self.cfg);
                state.updates.push(round);
            }
        }
        if i >= self.cfg.n_query {
            return Ok(());
        }
        self.advance(i + 1)
    }

    /// Generate candidates from query `i` on, penalizing those that cannot
    /// be tracked safely, until one is ready for feedback or the budget ends.
    fn advance(&mut self, i: usize) -> Result<()> {
        let z = self.next_latent(i)?;
        let ws = &self.problem.workspace;
        let reference = self.latent().decode_trajectory(&z, ws)?;
        match mpc_track(&reference, ws, &self.problem.dynamics, &self.problem.mpc) {
            Ok(executed)
                if ws.trajectory_collision_free(&executed)
                    && verify_feasible(&executed, &self.problem.dynamics) =>
            {
                self.pending = Some(Candidate {
                    query_index: i,
                    z,
                    reference,
                    executed,
                });
                Ok(())
            }
            Ok(_) | Err(Error::InfeasibleTracking { .. }) => {
                let worst = self
                    .records()
                    .iter()
                    .filter(|r| !r.penalized)
                    .map(|r| r.obj)
                    .fold(1.0, f64::max);
                let rec = FeedbackRecord {
                    query_index: i,
                    trajectory: reference.clone(),
                    reference,
                    satisfaction: 0.0,
                    tracking_residual: 0.0,
                    length: 0.0,
                    obj: 10.0 * worst,
                    penalized: true,
                };
                self.push(rec);
                self.after_query(i)
            }
            Err(e) => Err(e),
        }
    }

    /// Region spanned by the current encodings of the anchors and labeled
    /// trajectories, or the whole cube when there are no anchors.
    fn search_box(&self) -> Result<SearchBox> {
        let latent = self.latent();
        if self.anchors.is_empty() {
            return Ok(SearchBox::unit(latent.dim()));
        }
        let ws = &self.problem.workspace;
        let labeled = self.records().iter().map(|r| r.trajectory.normalized(ws));
        let codes = self
            .anchors
            .iter()
            .cloned()
            .chain(labeled)
            .map(|x| latent.encode(&x))
            .collect::<Result<Vec<_>>>()?;
        Ok(SearchBox::around(&codes, SEARCH_MARGIN, SEARCH_MIN_WIDTH))
    }

    fn next_latent(&self, i: usize) -> Result<Vec<f64>> {
        let bounds = self.search_box()?;
        let state = match &self.state {
            Some(s) => s,
            None if self.early.is_empty() => {
                return Ok(bounds.sample(&mut seeds::rng(self.cfg.seed, seeds::FIRST_QUERY, 0)));
            }
            // only penalties so far: keep sampling at random
            None => {
                let mut rng = seeds::rng(self.cfg.seed, seeds::FIRST_QUERY, i as u64);
                return Ok(bounds.sample(&mut rng));
            }
        };
        let gp = state.fit_gp(&self.problem.workspace, self.cfg.standardize)?;
        let seed = seeds::substream(self.cfg.seed, seeds::ACQUISITION, i as u64);
        let (z, _) = propose_in(&gp, &self.cfg, seed, self.exec, &bounds);
        Ok(z)
    }
}

fn argmin_obj(records: &[FeedbackRecord]) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.obj < records[best].obj {
            best = i;
        }
    }
    best
}

/// Run the whole query loop against `source`.
pub fn run(
    problem: Problem,
    cfg: BoConfig,
    latent: LatentModel,
    anchors: Vec<Vec<f64>>,
    source: &mut dyn FeedbackSource,
    exec: Exec,
) -> Result<RunState> {
    let mut opt = Optimizer::new(problem, cfg, latent, anchors, exec)?;
    while let Some(c) = opt.pending() {
        let f = source.feedback(&c.executed)?;
        opt.submit(f)?;
    }
    opt.into_state().ok_or_else(|| {
        Error::Session("every query failed tracking; no feedback was collected".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{random_population, FeedbackConfig, SimulatedHumans};
    use crate::geometry::Point2;
    use proptest::prelude::*;

    fn hyper(sf: f64, l: f64) -> GpHyperparams {
        GpHyperparams {
            sigma_f: sf,
            length_scale: l,
            noise: 1e-4,
        }
    }

    fn bowl_gp(scale: f64, standardize: bool) -> GpModel {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                let z = vec![0.1 + 0.2 * i as f64, 0.1 + 0.2 * j as f64];
                ys.push(scale * ((z[0] - 0.37).powi(2) + (z[1] - 0.62).powi(2)));
                xs.push(z);
            }
        }
        GpModel::fit(hyper(1.0, 0.4), xs, ys, standardize).unwrap()
    }

    fn small_cfg() -> BoConfig {
        BoConfig {
            n_query: 6,
            n_m: 3,
            n_e: 3,
            acq_restarts: 6,
            acq_iters: 20,
            ..Default::default()
        }
    }

    fn problem() -> Problem {
        Problem {
            workspace: Workspace::reference_arena(),
            dynamics: DynamicsConfig::default(),
            mpc: MpcConfig::default(),
            objective: ObjectiveConfig::default(),
        }
    }

    fn humans() -> SimulatedHumans {
        let ws = Workspace::reference_arena();
        SimulatedHumans(FeedbackConfig {
            lambda: 1.0,
            k: 5,
            population: random_population(&ws, 20, 5, 1.0, 1.0, 42),
        })
    }

    #[test]
    fn acquisition_limits() {
        let gp = GpModel::fit(hyper(1.5, 0.2), vec![vec![0.3, 0.3]], vec![0.7], false).unwrap();
        let (mu, _) = gp.posterior(&[0.6, 0.1]);
        assert_eq!(acquisition(&gp, &[0.6, 0.1], 0.0), mu);
        assert!((acquisition(&gp, &[0.3, 0.3], 0.0) - 0.7).abs() < 1e-6);
        assert!((acquisition(&gp, &[80.0, 80.0], 2.0) + 2.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn proposal_explores_away_from_single_point() {
        let gp = GpModel::fit(hyper(1.0, 0.2), vec![vec![0.5, 0.5, 0.5]], vec![0.0], false).unwrap();
        let cfg = BoConfig {
            kappa: 10.0,
            ..Default::default()
        };
        let (z, _) = propose(&gp, &cfg, 1, Exec::Sequential);
        let dist: f64 = z.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>().sqrt();
        assert!(dist >= 0.25, "{dist}");
        assert!(z.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn proposal_matches_dense_grid() {
        let gp = bowl_gp(1.0, false);
        let cfg = BoConfig {
            kappa: 0.0,
            ..Default::default()
        };
        let (z, v) = propose(&gp, &cfg, 5, Exec::Parallel);
        let n = 317;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..n {
            for j in 0..n {
                let p = [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64];
                let a = acquisition(&gp, &p, 0.0);
                if a < best.0 {
                    best = (a, p);
                }
            }
        }
        let d = ((z[0] - best.1[0]).powi(2) + (z[1] - best.1[1]).powi(2)).sqrt();
        assert!(d <= 1e-2, "proposal {z:?} vs grid {:?}", best.1);
        assert!(v <= best.0 + 1e-9);
    }

    #[test]
    fn proposal_is_seeded_and_scale_invariant() {
        let cfg = BoConfig {
            kappa: 0.0,
            acq_restarts: 8,
            ..Default::default()
        };
        let a = propose(&bowl_gp(1.0, true), &cfg, 3, Exec::Sequential);
        let b = propose(&bowl_gp(1.0, true), &cfg, 3, Exec::Parallel);
        assert_eq!(a, b);
        let c = propose(&bowl_gp(7.0, true), &cfg, 3, Exec::Sequential);
        for (x, y) in a.0.iter().zip(&c.0) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn local_search_never_worsens_start() {
        let gp = bowl_gp(1.0, false);
        let f = |z: &[f64]| acquisition(&gp, z, 2.0);
        for s in [[0.1, 0.9], [0.5, 0.5], [0.95, 0.05]] {
            let (_, v) = coordinate_search(&f, s.to_vec(), 50, &SearchBox::unit(2));
            assert!(v <= f(&s));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("hybrid".parse::<Mode>().is_err());
    }

    #[test]
    fn zero_queries_keeps_initial_sample() {
        let latent = LatentModel::random(6, 42, 0).unwrap();
        let cfg = BoConfig {
            n_query: 0,
            ..small_cfg()
        };
        let s = run(problem(), cfg, latent, Vec::new(), &mut humans(), Exec::Sequential).unwrap();
        assert_eq!(s.labeled.len(), 1);
        assert_eq!(s.query_index, 0);
    }

    #[test]
    fn run_is_safe_monotone_and_reproducible() {
        let latent = LatentModel::random(6, 42, 1).unwrap();
        let p = problem();
        let a = run(p.clone(), small_cfg(), latent.clone(), Vec::new(), &mut humans(), Exec::Parallel).unwrap();
        let b = run(p.clone(), small_cfg(), latent, Vec::new(), &mut humans(), Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labeled.len(), a.query_index + 1);
        assert_eq!(a.query_index, 6);
        assert_eq!(a.updates.len(), 2);
        for w in a.best_obj_series().windows(2) {
            assert!(w[1] <= w[0]);
        }
        let min = a.labeled.iter().map(|r| r.obj).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best().obj, min);
        for r in a.labeled.iter().filter(|r| !r.penalized) {
            assert!(p.workspace.trajectory_collision_free(&r.trajectory));
            assert!(verify_feasible(&r.trajectory, &p.dynamics));
        }
    }

    #[test]
    fn unsupervised_never_updates() {
        let latent = LatentModel::random(6, 42, 2).unwrap();
        let cfg = BoConfig {
            mode: Mode::Unsupervised,
            ..small_cfg()
        };
        let s = run(problem(), cfg, latent.clone(), Vec::new(), &mut humans(), Exec::Parallel).unwrap();
        assert!(s.updates.is_empty());
        assert_eq!(s.latent, latent);
        assert_eq!(s.hyper, cfg.gp);
    }

    #[test]
    fn unbiased_objective_equals_feedback() {
        let latent = LatentModel::random(6, 42, 3).unwrap();
        let cfg = BoConfig {
            bias_enabled: false,
            n_query: 3,
            n_m: 3,
            ..small_cfg()
        };
        let s = run(problem(), cfg, latent, Vec::new(), &mut humans(), Exec::Parallel).unwrap();
        for r in s.labeled.iter().filter(|r| !r.penalized) {
            assert_eq!(r.obj, r.satisfaction);
        }
    }

    fn state_with_data() -> (RunState, Problem) {
        let p = problem();
        let latent = LatentModel::random(6, 42, 4).unwrap();
        let ws = &p.workspace;
        let labeled: Vec<FeedbackRecord> = (0..6)
            .map(|i| {
                let mid = Point2::new(4.0 + 2.0 * i as f64, 16.0 - 2.0 * i as f64);
                let t = Trajectory::new(vec![ws.start, mid, ws.goal]).unwrap().resample(20);
                let mut r = objective_from(i as f64, &p.objective, &t, &t).unwrap();
                r.query_index = i;
                r
            })
            .collect();
        let state = RunState {
            latent,
            hyper: GpHyperparams::default(),
            best: 0,
            query_index: 5,
            labeled,
            updates: Vec::new(),
        };
        (state, p)
    }

    #[test]
    fn zero_step_update_is_identity() {
        let (mut s, p) = state_with_data();
        let before = s.clone();
        let cfg = BoConfig {
            alpha_e: 0.0,
            alpha_d: 0.0,
            alpha_g: 0.0,
            ..Default::default()
        };
        let r = parameter_update(&mut s, &p, &cfg);
        assert!(r.aborted.is_none());
        assert_eq!(s.latent, before.latent);
        assert_eq!(s.hyper, before.hyper);
    }

    #[test]
    fn update_round_does_not_increase_joint_loss() {
        for window in [NmllWindow::Recent, NmllWindow::All] {
            let (mut s, p) = state_with_data();
            let cfg = BoConfig {
                nmll_window: window,
                alpha_e: 0.05,
                alpha_d: 0.05,
                alpha_g: 0.1,
                ..Default::default()
            };
            let r = parameter_update(&mut s, &p, &cfg);
            assert!(r.aborted.is_none());
            assert!(r.loss_after <= r.loss_before);
            assert!(r.epochs > 0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn proposals_stay_in_open_box(seed in 0u64..1000, kappa in 0.0..5.0f64) {
            let gp = bowl_gp(1.0, true);
            let cfg = BoConfig { kappa, acq_restarts: 4, acq_iters: 10, ..Default::default() };
            let (z, v) = propose(&gp, &cfg, seed, Exec::Sequential);
            prop_assert!(z.iter().all(|&x| x > 0.0 && x < 1.0));
            prop_assert_eq!(v, acquisition(&gp, &z, kappa));
        }
    }
}
