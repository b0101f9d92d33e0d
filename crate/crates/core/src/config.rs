//! Experiment configuration in TOML, with field-addressed errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bo::{BoConfig, Mode};
use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, ObjectiveConfig};
use crate::geometry::Workspace;
use crate::latent::PretrainConfig;
use crate::planners::{MpcConfig, RrtConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Trajectories generated per experiment seed.
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { size: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub dim: usize,
    pub ambient_dim: usize,
    pub epochs: usize,
    pub step: f64,
    pub batch: usize,
    /// Use this pretrained model instead of pretraining per seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            dim: 6,
            ambient_dim: 42,
            epochs: PretrainConfig::default().epochs,
            step: PretrainConfig::default().step,
            batch: PretrainConfig::default().batch,
            checkpoint: None,
        }
    }
}

impl LatentConfig {
    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            step: self.step,
            batch: self.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    /// Exploration-bias settings to sweep.
    pub bias: Vec<bool>,
    pub output_dir: PathBuf,
    /// Fill the `wall_time` run-log column (breaks byte-identical logs).
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            modes: Mode::ALL.to_vec(),
            bias: vec![true, false],
            output_dir: PathBuf::from("out"),
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub workspace: Workspace,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub rrt: RrtConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub feedback: FeedbackConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub latent: LatentConfig,
    #[serde(default)]
    pub bo: BoConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let reason = e.into_inner().message().trim().to_string();
            if path == "." {
                Error::Parse {
                    origin: origin.to_string(),
                    reason,
                }
            } else {
                Error::Config { path, reason }
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative checkpoint paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let (Some(ck), Some(dir)) = (&cfg.latent.checkpoint, path.parent()) {
            if ck.is_relative() {
                cfg.latent.checkpoint = Some(dir.join(ck));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            origin: "config".into(),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Invalid { field, reason } => Error::Config {
                path: field,
                reason,
            },
            other => other,
        };
        self.validate_fields().map_err(as_config)
    }

    fn validate_fields(&self) -> Result<()> {
        self.workspace.validate()?;
        self.dynamics.validate()?;
        self.mpc.validate()?;
        self.rrt.validate(&self.dynamics)?;
        self.feedback.validate(&self.workspace)?;
        self.objective.validate()?;
        self.latent.pretrain().validate()?;
        self.bo.validate()?;
        let want = 2 * (self.rrt.resample_steps + 1);
        if self.latent.ambient_dim != want {
            return Err(Error::invalid(
                "latent.ambient_dim",
                format!(
                    "is {} but rrt.resample_steps = {} requires 2(T+1) = {want}",
                    self.latent.ambient_dim, self.rrt.resample_steps
                ),
            ));
        }
        if self.latent.dim == 0 || self.latent.dim >= self.latent.ambient_dim {
            return Err(Error::invalid("latent.dim", "must satisfy 0 < dim < ambient_dim"));
        }
        if self.corpus.size == 0 {
            return Err(Error::invalid("corpus.size", "must be at least 1"));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::invalid("experiment.seeds", "must not be empty"));
        }
        if self.experiment.modes.is_empty() {
            return Err(Error::invalid("experiment.modes", "must not be empty"));
        }
        if self.experiment.bias.is_empty() {
            return Err(Error::invalid("experiment.bias", "must not be empty"));
        }
        Ok(())
    }
}

/// Parse a seed list written as `a..b` (half-open) or `a,b,c`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::invalid("seeds", format!("`{s}` is neither `a..b` nor a comma list"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b <= a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| bad()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[workspace]
width = 20.0
height = 20.0
start = { x = 0.0, y = 0.0 }
goal = { x = 20.0, y = 20.0 }
obstacles = [ { center = { x = 5.0, y = 8.0 }, half_extent = 1.0 } ]

[feedback]
lambda = 1.0
k = 5
population = [ { role = "rater", x = 3.0, y = 3.0, radius = 1.0 } ]
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        assert_eq!(cfg.latent.dim, 6);
        assert_eq!(cfg.bo, BoConfig::default());
        assert_eq!(cfg.experiment.seeds.len(), 10);
    }

    #[test]
    fn round_trip_is_value_identical() {
        let cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&text, "inline").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_field_is_addressed() {
        let text = MINIMAL.replace("k = 5\n", "");
        match RunConfig::parse(&text, "inline") {
            Err(Error::Config { path, reason }) => {
                assert_eq!(path, "feedback");
                assert!(reason.contains("`k`"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("lambda = 1.0", "lambda = \"x\"");
        assert!(matches!(
            RunConfig::parse(&text, "inline"),
            Err(Error::Config { path, .. }) if path == "feedback.lambda"
        ));
    }

    #[test]
    fn inconsistent_dimensions_name_both_fields() {
        let text = format!("{MINIMAL}\n[latent]\nambient_dim = 40\n");
        let err = RunConfig::parse(&text, "inline").unwrap_err().to_string();
        assert!(err.contains("latent.ambient_dim") && err.contains("rrt.resample_steps"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[bo]\nkapa = 2.0\n");
        assert!(RunConfig::parse(&text, "inline").is_err());
    }

    #[test]
    fn seeds_syntax() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
