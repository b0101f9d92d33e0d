//! Gaussian-process regression with the squared-exponential kernel
//! `k(a, b) = sf^2 exp(-|a - b|^2 / (2 l^2))`.
//!
//! The Gram matrix always carries `sn^2 I` on its diagonal. Targets are
//! optionally standardized before fitting; predictions are returned in the
//! original units either way. Hyperparameters are optimized in log space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds on `ln sf` and `ln l`.
pub const LOG_HYPER_BOUNDS: (f64, f64) = (-4.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyperparams {
    pub sigma_f: f64,
    pub length_scale: f64,
    /// Noise / jitter scale `sn`; `sn^2` is added to the Gram diagonal.
    pub noise: f64,
}

impl Default for GpHyperparams {
    fn default() -> Self {
        Self {
            sigma_f: 1.0,
            length_scale: 0.5,
            noise: 1e-4,
        }
    }
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gp.sigma_f", self.sigma_f),
            ("gp.length_scale", self.length_scale),
            ("gp.noise", self.noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// `(ln sf, ln l)`.
    pub fn log_params(&self) -> [f64; 2] {
        [self.sigma_f.ln(), self.length_scale.ln()]
    }

    /// Rebuild from log parameters, clamped into [`LOG_HYPER_BOUNDS`].
    pub fn with_log_params(&self, p: [f64; 2]) -> Self {
        let (lo, hi) = LOG_HYPER_BOUNDS;
        Self {
            sigma_f: p[0].clamp(lo, hi).exp(),
            length_scale: p[1].clamp(lo, hi).exp(),
            noise: self.noise,
        }
    }
}

pub fn kernel(a: &[f64], b: &[f64], h: &GpHyperparams) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    h.sigma_f * h.sigma_f * (-r2 / (2.0 * h.length_scale * h.length_scale)).exp()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel matrix over `inputs` without the noise term.
pub fn gram(inputs: &[Vec<f64>], h: &GpHyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| kernel(&inputs[i], &inputs[j], h))
}

/// Affine map between raw targets and the values the GP is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer {
        mean: 0.0,
        scale: 1.0,
    };

    /// Sample mean and (population) standard deviation; unit scale when
    /// the targets are constant.
    pub fn fit(y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self {
            mean,
            scale: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }
}

/// A fitted GP snapshot.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyperparams,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub standardizer: Standardizer,
    /// Diagonal term actually used, `>= noise^2` after any escalation.
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y: DVector<f64>,
}

impl GpModel {
    /// Fit on `(inputs, targets)`. When the factorization fails the diagonal
    /// term is multiplied by 10, at most 3 times.
    pub fn fit(
        hyper: GpHyperparams,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        standardize: bool,
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let d = inputs[0].len();
        if let Some(bad) = inputs.iter().find(|z| z.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "GP target".into(),
            });
        }
        let standardizer = if standardize {
            Standardizer::fit(&targets)
        } else {
            Standardizer::IDENTITY
        };
        let y = DVector::from_iterator(targets.len(), targets.iter().map(|&v| standardizer.apply(v)));
        let k = gram(&inputs, &hyper);
        let mut jitter = hyper.noise * hyper.noise;
        let mut chol = None;
        for _ in 0..4 {
            let mut m = k.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(m) {
                chol = Some(c);
                break;
            }
            jitter *= 10.0;
        }
        let chol = chol.ok_or(Error::SingularKernel { jitter })?;
        let alpha = chol.solve(&y);
        Ok(Self {
            hyper,
            inputs,
            targets,
            standardizer,
            jitter,
            chol,
            alpha,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Posterior mean and variance at `z`, in target units.
    pub fn posterior(&self, z: &[f64]) -> (f64, f64) {
        let kz = DVector::from_iterator(
            self.len(),
            self.inputs.iter().map(|x| kernel(z, x, &self.hyper)),
        );
        let mean = kz.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&kz).unwrap_or(kz);
        let var = (self.hyper.sigma_f * self.hyper.sigma_f - v.norm_squared()).max(0.0);
        let s = self.standardizer;
        (s.mean + s.scale * mean, s.scale * s.scale * var)
    }

    /// `1/2 y' K^-1 y + 1/2 ln|K| + n/2 ln 2 pi` on the fitted targets.
    pub fn nmll(&self) -> f64 {
        let n = self.len() as f64;
        let logdet: f64 = self.chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        0.5 * self.y.dot(&self.alpha) + 0.5 * logdet + 0.5 * n * LN_2PI
    }

    /// NMLL value with its gradients.
    pub fn nmll_gradients(&self) -> NmllGradients {
        let n = self.len();
        let kinv = self.chol.inverse();
        // W = K^-1 - alpha alpha'
        let w = &kinv - &self.alpha * self.alpha.transpose();
        let l2 = self.hyper.length_scale * self.hyper.length_scale;
        let mut d_log_sf = 0.0;
        let mut d_log_l = 0.0;
        let mut d_inputs = vec![vec![0.0; self.dim()]; n];
        for i in 0..n {
            for j in 0..n {
                let kf = kernel(&self.inputs[i], &self.inputs[j], &self.hyper);
                let wij = w[(i, j)];
                d_log_sf += 0.5 * wij * 2.0 * kf;
                d_log_l += 0.5 * wij * kf * sq_dist(&self.inputs[i], &self.inputs[j]) / l2;
                if i != j {
                    for (c, g) in d_inputs[i].iter_mut().enumerate() {
                        *g += wij * kf * -(self.inputs[i][c] - self.inputs[j][c]) / l2;
                    }
                }
            }
        }
        NmllGradients {
            value: self.nmll(),
            log_sigma_f: d_log_sf,
            log_length_scale: d_log_l,
            inputs: d_inputs,
        }
    }

    /// Refit with the same data under new hyperparameters.
    pub fn refit(&self, hyper: GpHyperparams) -> Result<Self> {
        Self::fit_with(hyper, self.inputs.clone(), self.targets.clone(), self.standardizer)
    }

    /// Refit with the same hyperparameters on new inputs and the same targets.
    pub fn with_inputs(&self, inputs: Vec<Vec<f64>>) -> Result<Self> {
        Self::fit_with(self.hyper, inputs, self.targets.clone(), self.standardizer)
    }

    fn fit_with(
        hyper: GpHyperparams,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let scaled: Vec<f64> = targets.iter().map(|&v| standardizer.apply(v)).collect();
        let mut m = Self::fit(hyper, inputs, scaled, false)?;
        m.targets = targets;
        m.standardizer = standardizer;
        Ok(m)
    }
}

/// Gradients of the NMLL w.r.t. log hyperparameters and each input.
#[derive(Debug, Clone)]
pub struct NmllGradients {
    pub value: f64,
    pub log_sigma_f: f64,
    pub log_length_scale: f64,
    pub inputs: Vec<Vec<f64>>,
}

/// Gradient descent on the NMLL in log space. A step that raises the NMLL
/// is halved up to 5 times and skipped if it still does not help.
pub fn fit_hypers(model: &GpModel, iters: usize, step: f64) -> Result<GpModel> {
    let mut current = model.clone();
    let mut value = current.nmll();
    for _ in 0..iters {
        let g = current.nmll_gradients();
        let p = current.hyper.log_params();
        let mut lr = step;
        let mut accepted = false;
        for _ in 0..=5 {
            let cand_hyper = current
                .hyper
                .with_log_params([p[0] - lr * g.log_sigma_f, p[1] - lr * g.log_length_scale]);
            if let Ok(cand) = current.refit(cand_hyper) {
                let v = cand.nmll();
                if v <= value {
                    current = cand;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(current)
}
