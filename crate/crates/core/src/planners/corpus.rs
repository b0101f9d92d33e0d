//! Unlabeled trajectory corpus for autoencoder pretraining.
//!
//! On disk the corpus is one header line followed by one trajectory per row,
//! `2(T+1)` comma-separated coordinates normalized to `[0,1]`:
//!
//! ```text
//! # steps=20 workspace=3f9c0a1b2c3d4e5f seeds=0..2000
//! 0,0,0.0412,0.0398,...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{Trajectory, Workspace};

use super::rrt::{rrt_generate, RrtConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusHeader {
    pub steps: usize,
    pub workspace: String,
    pub seed_start: u64,
    pub seed_end: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub header: CorpusHeader,
    /// Flattened, normalized trajectories.
    pub rows: Vec<Vec<f64>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn trajectories(&self, ws: &Workspace) -> Result<Vec<Trajectory>> {
        self.rows
            .iter()
            .map(|r| Trajectory::from_normalized(r, ws))
            .collect()
    }
}

/// Generate `n` RRT trajectories from consecutive seeds starting at
/// `first_seed`. Seeds whose planner fails are skipped; the call fails once
/// more than `n / 2 + 16` seeds have failed.
pub fn build_corpus(
    n: usize,
    ws: &Workspace,
    dynamics: &DynamicsConfig,
    cfg: &RrtConfig,
    first_seed: u64,
    exec: Exec,
) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::invalid("corpus.size", "must be at least 1"));
    }
    let failure_budget = n / 2 + 16;
    let mut rows = Vec::with_capacity(n);
    let mut next = first_seed;
    let mut failures = 0;
    let mut last_err = None;
    while rows.len() < n {
        let need = (n - rows.len()) as u64;
        let batch = exec.map_range(next..next + need, |seed| {
            rrt_generate(ws, dynamics, cfg, seed)
        });
        next += need;
        for result in batch {
            match result {
                Ok(t) => rows.push(t.normalized(ws)),
                Err(e) => {
                    failures += 1;
                    last_err = Some(e);
                }
            }
        }
        if failures > failure_budget {
            return Err(last_err.unwrap_or(Error::PlanningFailed { nodes: cfg.max_nodes }));
        }
    }
    Ok(Corpus {
        header: CorpusHeader {
            steps: cfg.resample_steps,
            workspace: ws.digest(),
            seed_start: first_seed,
            seed_end: next,
        },
        rows,
    })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    let h = &corpus.header;
    let _ = writeln!(
        out,
        "# steps={} workspace={} seeds={}..{}",
        h.steps, h.workspace, h.seed_start, h.seed_end
    );
    for row in &corpus.rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |reason: String| Error::Parse {
        origin: path.display().to_string(),
        reason,
    };
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| parse_err("empty corpus file".into()))?;
    let header = parse_header(header_line).ok_or_else(|| parse_err("bad header".into()))?;
    let width = 2 * (header.steps + 1);
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("row {}: {e}", i + 1)))?;
        if row.len() != width {
            return Err(parse_err(format!(
                "row {} has {} values, expected {width}",
                i + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(Corpus { header, rows })
}

fn parse_header(line: &str) -> Option<CorpusHeader> {
    let body = line.strip_prefix('#')?;
    let mut steps = None;
    let mut workspace = None;
    let mut seeds = None;
    for field in body.split_whitespace() {
        let (k, v) = field.split_once('=')?;
        match k {
            "steps" => steps = v.parse().ok(),
            "workspace" => workspace = Some(v.to_string()),
            "seeds" => {
                let (a, b) = v.split_once("..")?;
                seeds = Some((a.parse().ok()?, b.parse().ok()?));
            }
            _ => {}
        }
    }
    let (seed_start, seed_end) = seeds?;
    Some(CorpusHeader {
        steps: steps?,
        workspace: workspace?,
        seed_start,
        seed_end,
    })
}
