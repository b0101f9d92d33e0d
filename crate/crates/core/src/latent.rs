//! Single-layer sigmoid autoencoder over normalized, flattened trajectories.
//!
//! `z = s(W_E x + b_E)` and `x_hat = s(W_D z + b_D)`. The reconstruction loss
//! is `L_re = sum |x - x_hat|^2`. [`joint_gradients`] adds the GP's NMLL on
//! encoded labeled points, back-propagated through the encoder only.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Trajectory, Workspace};
use crate::gp::{GpHyperparams, GpModel, Standardizer};

const CHECKPOINT_MAGIC: &str = "hilplan-latent v1";

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub w_e: DMatrix<f64>,
    pub b_e: DVector<f64>,
    pub w_d: DMatrix<f64>,
    pub b_d: DVector<f64>,
}

impl LatentModel {
    /// All-zero parameters.
    pub fn zeros(d: usize, ambient: usize) -> Self {
        Self {
            w_e: DMatrix::zeros(d, ambient),
            b_e: DVector::zeros(d),
            w_d: DMatrix::zeros(ambient, d),
            b_d: DVector::zeros(ambient),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(d: usize, ambient: usize, seed: u64) -> Result<Self> {
        if d == 0 || d >= ambient {
            return Err(Error::invalid(
                "latent.dim",
                format!("must satisfy 0 < d < D = {ambient}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (d + ambient) as f64).sqrt();
        let mut m = Self::zeros(d, ambient);
        for v in m.w_e.iter_mut() {
            *v = rng.gen_range(-a..a);
        }
        for v in m.w_d.iter_mut() {
            *v = rng.gen_range(-a..a);
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.b_e.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.b_d.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    fn check(&self, what: usize, want: usize) -> Result<()> {
        if what != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                got: what,
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len(), self.ambient_dim())?;
        let a = &self.w_e * DVector::from_column_slice(x) + &self.b_e;
        Ok(a.iter().map(|&v| sigmoid(v)).collect())
    }

    /// Raw decoder output in `(0,1)^D`, endpoints not pinned.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len(), self.dim())?;
        let a = &self.w_d * DVector::from_column_slice(z) + &self.b_d;
        Ok(a.iter().map(|&v| sigmoid(v)).collect())
    }

    /// Decode into workspace coordinates with the first and last waypoints
    /// replaced by the workspace start and goal.
    pub fn decode_trajectory(&self, z: &[f64], ws: &Workspace) -> Result<Trajectory> {
        let mut t = Trajectory::from_normalized(&self.decode(z)?, ws)?;
        let wp = t.waypoints_mut();
        let last = wp.len() - 1;
        wp[0] = ws.start;
        wp[last] = ws.goal;
        Ok(t)
    }

    pub fn reconstruction_loss(&self, x: &[f64]) -> Result<f64> {
        let y = self.decode(&self.encode(x)?)?;
        Ok(x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Mean per-sample reconstruction loss.
    pub fn mean_loss(&self, data: &[Vec<f64>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("latent", "empty data set"));
        }
        let mut total = 0.0;
        for x in data {
            total += self.reconstruction_loss(x)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Parameters flattened as `W_E, b_E, W_D, b_D`, matrices column-major.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend(self.w_e.iter());
        p.extend(self.b_e.iter());
        p.extend(self.w_d.iter());
        p.extend(self.b_d.iter());
        p
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim() * self.ambient_dim() + self.dim() + self.ambient_dim()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.check(p.len(), self.param_count())?;
        let mut it = p.iter().copied();
        for v in self
            .w_e
            .iter_mut()
            .chain(self.b_e.iter_mut())
            .chain(self.w_d.iter_mut())
            .chain(self.b_d.iter_mut())
        {
            *v = it.next().unwrap_or_default();
        }
        Ok(())
    }

    /// `self - (alpha_e * g.encoder, alpha_d * g.decoder)`.
    pub fn stepped(&self, g: &LatentGrads, alpha_e: f64, alpha_d: f64) -> Self {
        Self {
            w_e: &self.w_e - &g.w_e * alpha_e,
            b_e: &self.b_e - &g.b_e * alpha_e,
            w_d: &self.w_d - &g.w_d * alpha_d,
            b_d: &self.b_d - &g.b_d * alpha_d,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|reason| Error::Parse {
            origin: path.display().to_string(),
            reason,
        })
    }

    /// Text checkpoint: magic line, `d D`, then `W_E`, `b_E`, `W_D`, `b_D`
    /// as row-major lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC}\n{} {}\n", self.dim(), self.ambient_dim());
        let mut block = |name: &str, m: &DMatrix<f64>| {
            let _ = writeln!(out, "{name}");
            for r in m.row_iter() {
                let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        block("W_E", &self.w_e);
        block("b_E", &DMatrix::from_row_slice(1, self.dim(), self.b_e.as_slice()));
        block("W_D", &self.w_d);
        block(
            "b_D",
            &DMatrix::from_row_slice(1, self.ambient_dim(), self.b_d.as_slice()),
        );
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(format!("missing `{CHECKPOINT_MAGIC}` header"));
        }
        let dims: Vec<usize> = lines
            .next()
            .ok_or("missing dimensions")?
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| format!("dimension: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        let [d, big_d] = dims[..] else {
            return Err("dimension line must hold `d D`".into());
        };
        let mut read = |name: &str, rows: usize, cols: usize| {
            if lines.next() != Some(name) {
                return Err(format!("expected block {name}"));
            }
            let mut vals = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let line = lines.next().ok_or(format!("{name}: missing row {r}"))?;
                for v in line.split_whitespace() {
                    vals.push(v.parse::<f64>().map_err(|e| format!("{name}: {e}"))?);
                }
            }
            if vals.len() != rows * cols {
                return Err(format!("{name}: expected {} values", rows * cols));
            }
            Ok(DMatrix::from_row_slice(rows, cols, &vals))
        };
        let w_e = read("W_E", d, big_d)?;
        let b_e = read("b_E", 1, d)?;
        let w_d = read("W_D", big_d, d)?;
        let b_d = read("b_D", 1, big_d)?;
        let m = Self {
            w_e,
            b_e: DVector::from_iterator(d, b_e.iter().copied()),
            w_d,
            b_d: DVector::from_iterator(big_d, b_d.iter().copied()),
        };
        if !m.is_finite() {
            return Err("non-finite parameter".into());
        }
        Ok(m)
    }
}

/// Gradient with the same shape as [`LatentModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrads {
    pub w_e: DMatrix<f64>,
    pub b_e: DVector<f64>,
    pub w_d: DMatrix<f64>,
    pub b_d: DVector<f64>,
}

impl LatentGrads {
    pub fn zeros_like(m: &LatentModel) -> Self {
        Self {
            w_e: DMatrix::zeros(m.w_e.nrows(), m.w_e.ncols()),
            b_e: DVector::zeros(m.b_e.len()),
            w_d: DMatrix::zeros(m.w_d.nrows(), m.w_d.ncols()),
            b_d: DVector::zeros(m.b_d.len()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w_e *= s;
        self.b_e *= s;
        self.w_d *= s;
        self.b_d *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.w_e
            .iter()
            .chain(self.b_e.iter())
            .chain(self.w_d.iter())
            .chain(self.b_d.iter())
            .all(|v| v.is_finite())
    }

    /// Flattened in the same order as [`LatentModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.w_e
            .iter()
            .chain(self.b_e.iter())
            .chain(self.w_d.iter())
            .chain(self.b_d.iter())
            .copied()
            .collect()
    }

    /// Add the encoder-side gradient of `sum_k dz_k . z_k` where `z = E(x)`.
    fn backprop_encoder(&mut self, x: &DVector<f64>, z: &DVector<f64>, dz: &DVector<f64>) {
        let da = dz.component_mul(&z.map(|v| v * (1.0 - v)));
        self.w_e += &da * x.transpose();
        self.b_e += &da;
    }
}

/// Summed reconstruction loss over `batch` and its gradient.
pub fn reconstruction_gradients(m: &LatentModel, batch: &[Vec<f64>]) -> Result<(f64, LatentGrads)> {
    let mut g = LatentGrads::zeros_like(m);
    let mut loss = 0.0;
    for x in batch {
        m.check(x.len(), m.ambient_dim())?;
        let x = DVector::from_column_slice(x);
        let z = (&m.w_e * &x + &m.b_e).map(sigmoid);
        let y = (&m.w_d * &z + &m.b_d).map(sigmoid);
        let r = &y - &x;
        loss += r.norm_squared();
        let dc = (2.0 * r).component_mul(&y.map(|v| v * (1.0 - v)));
        g.w_d += &dc * z.transpose();
        g.b_d += &dc;
        let dz = m.w_d.transpose() * &dc;
        g.backprop_encoder(&x, &z, &dz);
    }
    Ok((loss, g))
}

/// Value and gradients of `L_re(recon) + L_nmll(gp_x, gp_y)`.
#[derive(Debug, Clone)]
pub struct JointGrads {
    pub reconstruction: f64,
    pub nmll: f64,
    /// Encoder blocks hold `d(L_re + L_nmll)`, decoder blocks `d L_re`.
    pub latent: LatentGrads,
    pub log_sigma_f: f64,
    pub log_length_scale: f64,
}

impl JointGrads {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.nmll
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
            && self.latent.is_finite()
            && self.log_sigma_f.is_finite()
            && self.log_length_scale.is_finite()
    }
}

/// Joint objective used by the online parameter updates. The GP is fitted on
/// `E(gp_x)` with targets standardized by `standardizer`, which is held fixed
/// so the objective is a smooth function of the encoder.
pub fn joint_gradients(
    m: &LatentModel,
    recon: &[Vec<f64>],
    gp_x: &[Vec<f64>],
    gp_y: &[f64],
    hyper: GpHyperparams,
    standardizer: Standardizer,
) -> Result<JointGrads> {
    let (reconstruction, mut latent) = reconstruction_gradients(m, recon)?;
    let zs: Vec<Vec<f64>> = gp_x.iter().map(|x| m.encode(x)).collect::<Result<_>>()?;
    let scaled: Vec<f64> = gp_y.iter().map(|&v| standardizer.apply(v)).collect();
    let gp = GpModel::fit(hyper, zs.clone(), scaled, false)?;
    let ng = gp.nmll_gradients();
    for ((x, z), dz) in gp_x.iter().zip(&zs).zip(&ng.inputs) {
        latent.backprop_encoder(
            &DVector::from_column_slice(x),
            &DVector::from_column_slice(z),
            &DVector::from_column_slice(dz),
        );
    }
    Ok(JointGrads {
        reconstruction,
        nmll: ng.value,
        latent,
        log_sigma_f: ng.log_sigma_f,
        log_length_scale: ng.log_length_scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub step: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            step: 0.05,
            batch: 32,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("latent.step", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("latent.batch", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub model: LatentModel,
    /// Mean loss over the corpus before training.
    pub initial_loss: f64,
    /// Mean loss over the corpus after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Epochs whose loss rose more than 10% over the previous one.
    pub flagged_epochs: Vec<usize>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Mini-batch SGD on the mean per-sample reconstruction loss.
pub fn pretrain(
    model: &LatentModel,
    corpus: &[Vec<f64>],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let initial_loss = model.mean_loss(corpus)?;
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut flagged_epochs = Vec::new();
    let mut prev = initial_loss;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let (_, mut g) = reconstruction_gradients(&m, &batch)?;
            g.scale(1.0 / batch.len() as f64);
            m = m.stepped(&g, cfg.step, cfg.step);
        }
        let loss = m.mean_loss(corpus)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("pretraining loss at epoch {epoch} (previous {prev})"),
            });
        }
        if loss > 1.1 * prev {
            flagged_epochs.push(epoch);
        }
        epoch_losses.push(loss);
        prev = loss;
    }
    Ok(PretrainReport {
        model: m,
        initial_loss,
        epoch_losses,
        flagged_epochs,
    })
}
