//! Command-line front end: argument parsing, pipeline verbs and exit codes.

pub mod server;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hilplan::bo::Mode;
use hilplan::config::{parse_seeds, RunConfig};
use hilplan::exec::Exec;
use hilplan::experiment::{
    export_trajectory, population_panels, prepare_seed, run_cell, run_experiment, summary_text,
    TrajectoryExport,
};
use hilplan::latent::{pretrain, LatentModel};
use hilplan::planners::{build_corpus, read_corpus, write_corpus};
use hilplan::{seeds, Error};

/// Exit status for invalid configuration or arguments.
pub const EXIT_CONFIG: u8 = 1;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "hilplan", version, about = "Human-in-the-loop trajectory planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the RRT corpus for each seed.
    Corpus(Common),
    /// Pretrain the autoencoder for each seed, reusing cached corpora.
    Pretrain(Common),
    /// Run one mode and bias setting over the seeds.
    Run(RunArgs),
    /// Run the full mode and bias grid and write the report.
    Ablate(Common),
    /// Export best trajectories for plotting.
    Export(ExportArgs),
    /// Serve interactive feedback sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Seed range `a..b` or list `a,b,c`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Query budget per run.
    #[arg(long)]
    pub queries: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum)]
    pub bias: Option<Switch>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Export this many freshly drawn populations instead of one run.
    #[arg(long)]
    pub panels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Session persistence directory (default `<out>/sessions`).
    #[arg(long)]
    pub sessions: Option<PathBuf>,
}

/// Map an error to the process exit status.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Invalid { .. } | Error::Parse { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Load the config and apply command-line overrides.
pub fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = &common.seeds {
        cfg.experiment.seeds = parse_seeds(s)?;
    }
    if let Some(out) = &common.out {
        cfg.experiment.output_dir = out.clone();
    }
    if let Some(q) = common.queries {
        cfg.bo.n_query = q;
        cfg.bo.n_m = cfg.bo.n_m.min(q.max(1));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_run(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(m) = args.mode {
        cfg.experiment.modes = vec![m];
        cfg.bo.mode = m;
    }
    if let Some(b) = args.bias {
        cfg.experiment.bias = vec![b == Switch::On];
        cfg.bo.bias_enabled = b == Switch::On;
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn corpus_path(out: &Path, seed: u64) -> PathBuf {
    out.join("corpus").join(format!("seed-{seed}.csv"))
}

pub fn cmd_corpus(cfg: &RunConfig, exec: Exec) -> Result<(), Error> {
    let out = &cfg.experiment.output_dir;
    for &seed in &cfg.experiment.seeds {
        let first = seeds::substream(seed, seeds::CORPUS, 0);
        let c = build_corpus(cfg.corpus.size, &cfg.workspace, &cfg.dynamics, &cfg.rrt, first, exec)?;
        let path = corpus_path(out, seed);
        let dir = out.join("corpus");
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        write_corpus(&c, &path)?;
        println!("seed {seed}: {} trajectories -> {}", c.len(), path.display());
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, exec: Exec) -> Result<(), Error> {
    let out = &cfg.experiment.output_dir;
    let lc = &cfg.latent;
    for &seed in &cfg.experiment.seeds {
        let cached = corpus_path(out, seed);
        let corpus = if cached.exists() {
            let c = read_corpus(&cached)?;
            if c.header.workspace != cfg.workspace.digest() || c.len() != cfg.corpus.size {
                return Err(Error::Invalid {
                    field: "corpus".into(),
                    reason: format!("{} was built for another configuration", cached.display()),
                });
            }
            c
        } else {
            let first = seeds::substream(seed, seeds::CORPUS, 0);
            build_corpus(cfg.corpus.size, &cfg.workspace, &cfg.dynamics, &cfg.rrt, first, exec)?
        };
        let init = LatentModel::random(lc.dim, lc.ambient_dim, seeds::substream(seed, seeds::INIT, 0))?;
        let report = pretrain(&init, &corpus.rows, &lc.pretrain(), seeds::substream(seed, seeds::PRETRAIN, 0))?;
        let path = out.join("models").join(format!("seed-{seed}.txt"));
        write(&path, &report.model.to_text())?;
        println!(
            "seed {seed}: loss {:.4} -> {:.4}, {} flagged epochs -> {}",
            report.initial_loss,
            report.final_loss(),
            report.flagged_epochs.len(),
            path.display()
        );
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, exec: Exec) -> Result<(), Error> {
    let report = run_experiment(cfg, exec)?;
    print!("{}", summary_text(&report));
    let failed: Vec<_> = report.cells.iter().filter_map(|c| c.error.as_ref()).collect();
    if !failed.is_empty() {
        return Err(Error::Session(format!("{} cells failed: {}", failed.len(), failed[0])));
    }
    Ok(())
}

pub fn cmd_export(cfg: &RunConfig, panels: Option<usize>, exec: Exec) -> Result<(), Error> {
    let out = cfg.experiment.output_dir.join("exports");
    let exports: Vec<TrajectoryExport> = match panels {
        Some(n) => population_panels(cfg, n, exec)?,
        None => {
            let seed = cfg.experiment.seeds[0];
            let mode = cfg.bo.mode;
            let mut prep = cfg.clone();
            prep.experiment.modes = vec![mode];
            let prepared = prepare_seed(&prep, seed, exec)?;
            let run = run_cell(cfg, &prepared, mode, cfg.bo.bias_enabled, exec)?;
            let label = format!("{mode}-bias-{}-seed-{seed}", if cfg.bo.bias_enabled { "on" } else { "off" });
            vec![TrajectoryExport::new(&label, run.state.best(), &cfg.workspace, &cfg.feedback.population)]
        }
    };
    for e in &exports {
        let path = out.join(format!("{}.json", e.label));
        export_trajectory(e, &path)?;
        println!("{} (F = {}) -> {}", e.label, e.satisfaction, path.display());
    }
    Ok(())
}

/// Execute a parsed command line.
pub fn execute(cli: Cli) -> Result<(), Error> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Corpus(c) => cmd_corpus(&load(&c)?, exec),
        Command::Pretrain(c) => cmd_pretrain(&load(&c)?, exec),
        Command::Ablate(c) => cmd_ablate(&load(&c)?, exec),
        Command::Run(r) => {
            let mut cfg = load(&r.common)?;
            apply_run(&mut cfg, &r);
            cmd_ablate(&cfg, exec)
        }
        Command::Export(e) => {
            let mut cfg = load(&e.run.common)?;
            apply_run(&mut cfg, &e.run);
            cmd_export(&cfg, e.panels, exec)
        }
        Command::Serve(s) => {
            let cfg = load(&s.common)?;
            let dir = s
                .sessions
                .unwrap_or_else(|| cfg.experiment.output_dir.join("sessions"));
            server::serve(cfg, &s.addr, &dir, exec)
        }
    }
}
