//! Gaussian process regression over cell centers, used to fill cells the
//! spatial solve could not reach.
//!
//! Zero prior mean, squared exponential kernel
//! `k(p, q) = s2 * exp(-|p - q|^2 / (2 l^2))`, fixed hyperparameters.

use faer::linalg::solvers::{Llt, Solve};
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Mat, Par, Side};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{CellSource, SpatialField};

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("no training points")]
    NoTrainingPoints,
    #[error("training point {0} is not finite")]
    NonFinite(usize),
    #[error("kernel matrix is not positive definite even with raised noise")]
    IllConditioned,
    #[error("invalid gp config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    /// Kernel length scale in pixels.
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub max_training_points: usize,
    /// Seed for subsampling when there are more points than `max_training_points`.
    pub seed: u64,
}

impl GpConfig {
    /// Defaults for an image `width` pixels wide: `l = width / 4`,
    /// `s_f = 0.05`, `s_n = 0.005`.
    pub fn for_width(width: usize) -> Self {
        Self {
            length_scale: 0.25 * width as f64,
            signal_variance: 0.05 * 0.05,
            noise_variance: 0.005 * 0.005,
            max_training_points: 1024,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.length_scale) {
            return Err(GpError::InvalidConfig("length_scale must be positive"));
        }
        if !positive(self.signal_variance) {
            return Err(GpError::InvalidConfig("signal_variance must be positive"));
        }
        if !positive(self.noise_variance) {
            return Err(GpError::InvalidConfig("noise_variance must be positive"));
        }
        if self.max_training_points == 0 {
            return Err(GpError::InvalidConfig("max_training_points must be positive"));
        }
        Ok(())
    }

    fn kernel(&self, p: [f64; 2], q: [f64; 2]) -> f64 {
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        self.signal_variance * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// A fitted GP: training inputs, the Cholesky factor of `K + s_n^2 I`, and
/// the weights `(K + s_n^2 I)^{-1} y`.
#[derive(Debug, Clone)]
pub struct GpModel {
    cfg: GpConfig,
    inputs: Vec<[f64; 2]>,
    llt: Llt<f64>,
    alpha: Vec<f64>,
    /// Noise variance actually used; raised once if the first factorization failed.
    pub noise_variance: f64,
}

pub fn gp_fit(points: &[([f64; 2], f64)], cfg: &GpConfig) -> Result<GpModel, GpError> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(GpError::NoTrainingPoints);
    }
    if let Some(k) = points
        .iter()
        .position(|(p, v)| !(p[0].is_finite() && p[1].is_finite() && v.is_finite()))
    {
        return Err(GpError::NonFinite(k));
    }
    let chosen: Vec<([f64; 2], f64)> = if points.len() > cfg.max_training_points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, points.len(), cfg.max_training_points).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        points.to_vec()
    };
    let inputs: Vec<[f64; 2]> = chosen.iter().map(|(p, _)| *p).collect();
    let n = inputs.len();
    let mut noise = cfg.noise_variance;
    let mut llt = None;
    for _ in 0..2 {
        // only the lower triangle is read
        let mut k = Mat::<f64>::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = cfg.signal_variance + noise;
            for i in (j + 1)..n {
                k[(i, j)] = cfg.kernel(inputs[i], inputs[j]);
            }
        }
        if let Ok(f) = k.llt(Side::Lower) {
            llt = Some(f);
            break;
        }
        noise *= 10.0;
    }
    let llt = llt.ok_or(GpError::IllConditioned)?;
    let y = Mat::<f64>::from_fn(n, 1, |i, _| chosen[i].1);
    let x = llt.solve(&y);
    let alpha = (0..n).map(|i| x[(i, 0)]).collect();
    Ok(GpModel {
        cfg: *cfg,
        inputs,
        llt,
        alpha,
        noise_variance: noise,
    })
}

impl GpModel {
    pub fn training_inputs(&self) -> &[[f64; 2]] {
        &self.inputs
    }

    /// Posterior mean at `query`; cheaper than [`predict`](Self::predict).
    pub fn predict_mean(&self, query: [f64; 2]) -> f64 {
        self.inputs
            .iter()
            .zip(self.alpha.iter())
            .map(|(&p, a)| self.cfg.kernel(p, query) * a)
            .sum()
    }

    /// Posterior mean and variance of the latent function at `query`.
    pub fn predict(&self, query: [f64; 2]) -> (f64, f64) {
        let (mean, var, _) = self.predict_raw(query);
        (mean, var)
    }

    /// Like [`predict`](Self::predict), also returning the unclamped variance.
    pub fn predict_raw(&self, query: [f64; 2]) -> (f64, f64, f64) {
        let n = self.inputs.len();
        let mut v = Mat::<f64>::from_fn(n, 1, |i, _| self.cfg.kernel(self.inputs[i], query));
        let mean = (0..n).map(|i| v[(i, 0)] * self.alpha[i]).sum();
        solve_lower_triangular_in_place(self.llt.L(), v.as_mut(), Par::Seq);
        let raw = self.cfg.signal_variance - (0..n).map(|i| v[(i, 0)] * v[(i, 0)]).sum::<f64>();
        (mean, raw.max(0.0), raw)
    }
}

/// Fills every unsolved cell of `field` with the GP posterior mean trained on
/// the solved cells. Solved cells keep their values.
pub fn complete_field(field: &SpatialField, cfg: &GpConfig) -> Result<SpatialField, GpError> {
    let grid = field.grid;
    let training: Vec<([f64; 2], f64)> = field
        .solved_cells()
        .map(|(c, v)| (grid.cell_center(c), v))
        .collect();
    let model = gp_fit(&training, cfg)?;
    let mut out = field.clone();
    for cell in 0..grid.cell_count() {
        if out.values[cell].is_none() {
            out.values[cell] = Some(model.predict_mean(grid.cell_center(cell)));
            out.sources[cell] = Some(CellSource::Gp);
        }
    }
    Ok(out)
}
