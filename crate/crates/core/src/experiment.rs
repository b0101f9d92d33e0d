//! Seeded ablation harness: per-seed corpus and pretraining, one optimizer run
//! per (mode, bias, seed) cell, run logs, aggregate report and plot exports.
//!
//! Output layout under `experiment.output_dir`:
//!
//! ```text
//! runs/<mode>-bias-<on|off>-seed-<seed>.csv   one row per query
//! pretrain/seed-<seed>.csv                    epoch losses
//! series.csv                                  best-F series of every cell
//! report.csv                                  median / quartiles per query
//! summary.txt                                 final medians and failures
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bo::{BoConfig, Mode, Optimizer, Problem, RunState};
use crate::config::RunConfig;
use crate::dynamics::verify_feasible;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feedback::{random_population, FeedbackConfig, FeedbackRecord, FeedbackSource, Human, Role, SimulatedHumans};
use crate::geometry::{Point2, Workspace};
use crate::latent::{pretrain, LatentModel, PretrainReport};
use crate::planners::build_corpus;
use crate::seeds;

pub const RUN_LOG_HEADER: [&str; 12] = [
    "query_index",
    "mode",
    "bias",
    "F",
    "tracking_residual",
    "length",
    "obj",
    "best_obj",
    "best_f",
    "penalized",
    "wall_time",
    "seed",
];

pub fn bias_label(bias: bool) -> &'static str {
    if bias {
        "on"
    } else {
        "off"
    }
}

pub fn problem_of(cfg: &RunConfig) -> Problem {
    Problem {
        workspace: cfg.workspace.clone(),
        dynamics: cfg.dynamics,
        mpc: cfg.mpc,
        objective: cfg.objective,
    }
}

/// Models shared by every cell of one seed.
#[derive(Debug, Clone)]
pub struct PreparedSeed {
    pub seed: u64,
    /// Random initialization, used as-is by the supervised mode.
    pub init: LatentModel,
    /// Pretrained model for the other modes, when any is requested.
    pub pretrained: Option<LatentModel>,
    pub pretrain_report: Option<PretrainReport>,
    /// Normalized corpus trajectories bounding the acquisition search of
    /// the pretrained modes.
    pub anchors: Vec<Vec<f64>>,
}

impl PreparedSeed {
    pub fn latent_for(&self, mode: Mode) -> Result<&LatentModel> {
        if !mode.pretrained() {
            return Ok(&self.init);
        }
        self.pretrained
            .as_ref()
            .ok_or_else(|| Error::invalid("latent", "mode needs a pretrained model"))
    }

    /// Search anchors for `mode`; the supervised mode searches the whole cube.
    pub fn anchors_for(&self, mode: Mode) -> Vec<Vec<f64>> {
        if mode.pretrained() {
            self.anchors.clone()
        } else {
            Vec::new()
        }
    }
}

/// Corpus rows kept as search anchors.
pub const ANCHORS: usize = 256;

pub fn prepare_seed(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<PreparedSeed> {
    let lc = &cfg.latent;
    let init = LatentModel::random(lc.dim, lc.ambient_dim, seeds::substream(seed, seeds::INIT, 0))?;
    if !cfg.experiment.modes.iter().any(|m| m.pretrained()) {
        return Ok(PreparedSeed {
            seed,
            init,
            pretrained: None,
            pretrain_report: None,
            anchors: Vec::new(),
        });
    }
    let corpus_seed = seeds::substream(seed, seeds::CORPUS, 0);
    if let Some(path) = &lc.checkpoint {
        let m = LatentModel::load(path)?;
        if m.dim() != lc.dim || m.ambient_dim() != lc.ambient_dim {
            return Err(Error::DimensionMismatch {
                expected: lc.ambient_dim,
                got: m.ambient_dim(),
            });
        }
        let n = cfg.corpus.size.min(ANCHORS);
        let corpus = build_corpus(n, &cfg.workspace, &cfg.dynamics, &cfg.rrt, corpus_seed, exec)?;
        return Ok(PreparedSeed {
            seed,
            init,
            pretrained: Some(m),
            pretrain_report: None,
            anchors: corpus.rows,
        });
    }
    let corpus = build_corpus(
        cfg.corpus.size,
        &cfg.workspace,
        &cfg.dynamics,
        &cfg.rrt,
        corpus_seed,
        exec,
    )?;
    let report = pretrain(
        &init,
        &corpus.rows,
        &lc.pretrain(),
        seeds::substream(seed, seeds::PRETRAIN, 0),
    )?;
    Ok(PreparedSeed {
        seed,
        init,
        pretrained: Some(report.model.clone()),
        pretrain_report: Some(report),
        anchors: corpus.rows.into_iter().take(ANCHORS).collect(),
    })
}

/// Result of one optimizer run against simulated humans.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub state: RunState,
    /// Seconds since the cell started, per labeled record.
    pub wall_times: Vec<f64>,
}

pub fn bo_config_for(cfg: &RunConfig, mode: Mode, bias: bool, seed: u64) -> BoConfig {
    BoConfig {
        mode,
        bias_enabled: bias,
        seed,
        ..cfg.bo
    }
}

pub fn run_cell(
    cfg: &RunConfig,
    prepared: &PreparedSeed,
    mode: Mode,
    bias: bool,
    exec: Exec,
) -> Result<CellRun> {
    let started = Instant::now();
    let bo = bo_config_for(cfg, mode, bias, prepared.seed);
    let mut source = SimulatedHumans(cfg.feedback.clone());
    let latent = prepared.latent_for(mode)?.clone();
    let mut opt = Optimizer::new(problem_of(cfg), bo, latent, prepared.anchors_for(mode), exec)?;
    let mut wall_times = Vec::new();
    let stamp = |opt: &Optimizer, wall: &mut Vec<f64>| {
        let t = started.elapsed().as_secs_f64();
        wall.resize(opt.records().len(), t);
    };
    stamp(&opt, &mut wall_times);
    while let Some(c) = opt.pending() {
        let f = source.feedback(&c.executed)?;
        opt.submit(f)?;
        stamp(&opt, &mut wall_times);
    }
    let state = opt.into_state().ok_or_else(|| {
        Error::Session("every query failed tracking; no feedback was collected".into())
    })?;
    Ok(CellRun { state, wall_times })
}

fn fmt_f64(v: f64) -> String {
    v.to_string()
}

/// CSV run log with one row per labeled record.
pub fn run_log_csv(
    mode: Mode,
    bias: bool,
    seed: u64,
    state: &RunState,
    wall_times: Option<&[f64]>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Parse {
        origin: "run log".into(),
        reason: e.to_string(),
    };
    w.write_record(RUN_LOG_HEADER).map_err(csv_err)?;
    let best_obj = state.best_obj_series();
    let best_f = state.best_f_series();
    for (i, r) in state.labeled.iter().enumerate() {
        let measured = |v: f64| if r.penalized { String::new() } else { fmt_f64(v) };
        let wall = wall_times
            .and_then(|w| w.get(i))
            .map(|&t| format!("{t:.3}"))
            .unwrap_or_default();
        w.write_record([
            r.query_index.to_string(),
            mode.to_string(),
            bias_label(bias).to_string(),
            measured(r.satisfaction),
            measured(r.tracking_residual),
            measured(r.length),
            fmt_f64(r.obj),
            fmt_f64(best_obj[i]),
            fmt_f64(best_f[i]),
            u8::from(r.penalized).to_string(),
            wall,
            seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        origin: "run log".into(),
        reason: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One parsed run-log row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RunLogRow {
    pub query_index: usize,
    pub mode: Mode,
    pub bias: String,
    #[serde(rename = "F")]
    pub f: Option<f64>,
    pub tracking_residual: Option<f64>,
    pub length: Option<f64>,
    pub obj: f64,
    pub best_obj: f64,
    pub best_f: f64,
    pub penalized: u8,
    pub wall_time: Option<f64>,
    pub seed: u64,
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        origin: path.display().to_string(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                origin: path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: Mode,
    pub bias: bool,
    pub seed: u64,
    /// Best feedback so far, indexed by query.
    pub best_f: Vec<f64>,
    pub best_obj: Vec<f64>,
    pub penalized: usize,
    /// Executed trajectories that reached feedback while unsafe.
    pub unsafe_evaluations: usize,
    pub evaluations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: Mode,
    pub bias: bool,
    pub runs: usize,
    pub median: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
}

impl Aggregate {
    pub fn median_at(&self, query: usize) -> Option<f64> {
        self.median.get(query).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl AblationReport {
    pub fn aggregate(&self, mode: Mode, bias: bool) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.mode == mode && a.bias == bias)
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-query median and quartiles over the successful cells of each
/// (mode, bias) pair, in the order the pairs first appear.
pub fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut keys: Vec<(Mode, bool)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.mode, c.bias)) {
            keys.push((c.mode, c.bias));
        }
    }
    keys.into_iter()
        .map(|(mode, bias)| {
            let runs: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.mode == mode && c.bias == bias && c.error.is_none())
                .collect();
            let len = runs.iter().map(|c| c.best_f.len()).min().unwrap_or(0);
            let mut median = Vec::with_capacity(len);
            let mut q25 = Vec::with_capacity(len);
            let mut q75 = Vec::with_capacity(len);
            for q in 0..len {
                let mut v: Vec<f64> = runs.iter().map(|c| c.best_f[q]).collect();
                v.sort_by(f64::total_cmp);
                median.push(quantile(&v, 0.5));
                q25.push(quantile(&v, 0.25));
                q75.push(quantile(&v, 0.75));
            }
            Aggregate {
                mode,
                bias,
                runs: runs.len(),
                median,
                q25,
                q75,
            }
        })
        .collect()
}

pub fn run_log_path(dir: &Path, mode: Mode, bias: bool, seed: u64) -> PathBuf {
    dir.join("runs")
        .join(format!("{mode}-bias-{}-seed-{seed}.csv", bias_label(bias)))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn audit(cfg: &RunConfig, state: &RunState) -> (usize, usize) {
    let evaluated: Vec<&FeedbackRecord> = state.labeled.iter().filter(|r| !r.penalized).collect();
    let bad = evaluated
        .iter()
        .filter(|r| {
            !cfg.workspace.trajectory_collision_free(&r.trajectory)
                || !verify_feasible(&r.trajectory, &cfg.dynamics)
        })
        .count();
    (bad, evaluated.len())
}

/// Run every requested cell, write logs and the report, return the report.
/// A failing cell is recorded and the others proceed.
pub fn run_experiment(cfg: &RunConfig, exec: Exec) -> Result<AblationReport> {
    let out = &cfg.experiment.output_dir;
    let prepared = exec.map(&cfg.experiment.seeds, |&seed| prepare_seed(cfg, seed, exec));
    for p in prepared.iter().flatten() {
        if let Some(r) = &p.pretrain_report {
            let mut text = String::from("epoch,loss\n");
            let _ = writeln!(text, "0,{}", r.initial_loss);
            for (i, l) in r.epoch_losses.iter().enumerate() {
                let _ = writeln!(text, "{},{l}", i + 1);
            }
            write(&out.join("pretrain").join(format!("seed-{}.csv", p.seed)), &text)?;
        }
    }
    let mut jobs = Vec::new();
    for (si, &seed) in cfg.experiment.seeds.iter().enumerate() {
        for &mode in &cfg.experiment.modes {
            for &bias in &cfg.experiment.bias {
                jobs.push((si, seed, mode, bias));
            }
        }
    }
    let results = exec.map(&jobs, |&(si, seed, mode, bias)| {
        let run = match &prepared[si] {
            Ok(p) => run_cell(cfg, p, mode, bias, exec),
            Err(e) => Err(Error::Session(format!("seed preparation failed: {e}"))),
        };
        (seed, mode, bias, run)
    });
    let mut cells = Vec::with_capacity(results.len());
    for (seed, mode, bias, run) in results {
        let cell = match run {
            Ok(run) => {
                let wall = cfg.experiment.record_wall_time.then_some(&run.wall_times[..]);
                let log = run_log_csv(mode, bias, seed, &run.state, wall)?;
                write(&run_log_path(out, mode, bias, seed), &log)?;
                let (unsafe_evaluations, evaluations) = audit(cfg, &run.state);
                CellResult {
                    mode,
                    bias,
                    seed,
                    best_f: run.state.best_f_series(),
                    best_obj: run.state.best_obj_series(),
                    penalized: run.state.labeled.iter().filter(|r| r.penalized).count(),
                    unsafe_evaluations,
                    evaluations,
                    error: None,
                }
            }
            Err(e) => CellResult {
                mode,
                bias,
                seed,
                best_f: Vec::new(),
                best_obj: Vec::new(),
                penalized: 0,
                unsafe_evaluations: 0,
                evaluations: 0,
                error: Some(e.to_string()),
            },
        };
        cells.push(cell);
    }
    let report = AblationReport {
        aggregates: aggregate(&cells),
        cells,
    };
    write_report(&report, out)?;
    Ok(report)
}

pub fn write_report(report: &AblationReport, dir: &Path) -> Result<()> {
    let mut series = String::from("mode,bias,seed,query_index,best_f,best_obj\n");
    for c in &report.cells {
        for (q, (f, o)) in c.best_f.iter().zip(&c.best_obj).enumerate() {
            let _ = writeln!(
                series,
                "{},{},{},{q},{f},{o}",
                c.mode,
                bias_label(c.bias),
                c.seed
            );
        }
    }
    write(&dir.join("series.csv"), &series)?;

    let mut table = String::from("mode,bias,query_index,runs,median_best_f,q25_best_f,q75_best_f\n");
    for a in &report.aggregates {
        for q in 0..a.median.len() {
            let _ = writeln!(
                table,
                "{},{},{q},{},{},{},{}",
                a.mode,
                bias_label(a.bias),
                a.runs,
                a.median[q],
                a.q25[q],
                a.q75[q]
            );
        }
    }
    write(&dir.join("report.csv"), &table)?;
    write(&dir.join("summary.txt"), &summary_text(report))
}

pub fn summary_text(report: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16}{:<6}{:>6}{:>14}{:>14}{:>12}",
        "mode", "bias", "runs", "median@30", "median@last", "iqr@last"
    );
    for a in &report.aggregates {
        let last = a.median.len().saturating_sub(1);
        let at = |v: &[f64], q: usize| v.get(q).map_or("-".to_string(), |x| format!("{x:.3}"));
        let iqr = match (a.q25.get(last), a.q75.get(last)) {
            (Some(lo), Some(hi)) => format!("{:.3}", hi - lo),
            _ => "-".into(),
        };
        let _ = writeln!(
            s,
            "{:<16}{:<6}{:>6}{:>14}{:>14}{:>12}",
            a.mode.to_string(),
            bias_label(a.bias),
            a.runs,
            at(&a.median, 30),
            at(&a.median, last),
            iqr
        );
    }
    let evaluations: usize = report.cells.iter().map(|c| c.evaluations).sum();
    let unsafe_total: usize = report.cells.iter().map(|c| c.unsafe_evaluations).sum();
    let penalized: usize = report.cells.iter().map(|c| c.penalized).sum();
    let _ = writeln!(
        s,
        "\nevaluated trajectories: {evaluations}, unsafe: {unsafe_total}, penalized proposals: {penalized}"
    );
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        let _ = writeln!(
            s,
            "failed cell {} bias={} seed={}: {}",
            c.mode,
            bias_label(c.bias),
            c.seed,
            c.error.as_deref().unwrap_or_default()
        );
    }
    s
}

pub const EXPORT_SCHEMA_VERSION: u32 = 1;

/// Plot-ready record of one reference/executed pair and its audience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryExport {
    pub schema_version: u32,
    pub label: String,
    pub workspace: Workspace,
    pub humans: Vec<Human>,
    pub query_index: usize,
    pub satisfaction: f64,
    pub obj: f64,
    pub reference: Vec<Point2>,
    pub tracked: Vec<Point2>,
}

impl TrajectoryExport {
    pub fn new(label: &str, record: &FeedbackRecord, ws: &Workspace, humans: &[Human]) -> Self {
        Self {
            schema_version: EXPORT_SCHEMA_VERSION,
            label: label.to_string(),
            workspace: ws.clone(),
            humans: humans.to_vec(),
            query_index: record.query_index,
            satisfaction: record.satisfaction,
            obj: record.obj,
            reference: record.reference.waypoints().to_vec(),
            tracked: record.trajectory.waypoints().to_vec(),
        }
    }
}

pub fn export_trajectory(export: &TrajectoryExport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(export).map_err(|e| Error::Parse {
        origin: path.display().to_string(),
        reason: e.to_string(),
    })?;
    write(path, &text)
}

pub fn load_export(path: &Path) -> Result<TrajectoryExport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        origin: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Best trajectories for `panels` freshly drawn populations with the same
/// role counts and radii as the configured one, using the semisupervised,
/// biased optimizer on the first configured seed.
pub fn population_panels(cfg: &RunConfig, panels: usize, exec: Exec) -> Result<Vec<TrajectoryExport>> {
    let seed = cfg.experiment.seeds[0];
    let mut base = cfg.clone();
    base.experiment.modes = vec![Mode::Semisupervised];
    let prepared = prepare_seed(&base, seed, exec)?;
    let radius = |role| {
        cfg.feedback
            .population
            .iter()
            .find(|h| h.role == role)
            .map_or(1.0, |h| h.radius)
    };
    let (rc, rr) = (radius(Role::Complainer), radius(Role::Rater));
    let complainers = cfg.feedback.count(Role::Complainer);
    let raters = cfg.feedback.count(Role::Rater);
    (0..panels)
        .map(|i| {
            let mut panel = base.clone();
            panel.feedback = FeedbackConfig {
                population: random_population(
                    &cfg.workspace,
                    complainers,
                    raters,
                    rc,
                    rr,
                    seeds::substream(seed, "population", i as u64),
                ),
                ..cfg.feedback.clone()
            };
            let run = run_cell(&panel, &prepared, Mode::Semisupervised, true, exec)?;
            Ok(TrajectoryExport::new(
                &format!("panel-{i}"),
                run.state.best(),
                &cfg.workspace,
                &panel.feedback.population,
            ))
        })
        .collect()
}
