//! Cross-validation folds from a simulated space-time Gaussian field.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.8;
pub const COV_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub k: usize,
    /// Spatial range in miles.
    pub space_range: f64,
    /// Temporal range in time steps.
    pub time_range: f64,
    /// Time steps per independently simulated block.
    pub block: usize,
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig { k: 5, space_range: 100.0, time_range: 5.0, block: 9, seed: 0 }
    }
}

/// Fold label (0-based) of every cell, in `t·S + s` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub labels: Vec<usize>,
}

impl FoldPlan {
    /// Cells in `fold`, and cells in the other folds.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut valid, mut train) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if l == fold {
                valid.push(i)
            } else {
                train.push(i)
            }
        }
        (train, valid)
    }
}

/// Great-circle distance in miles between `(lat, lon)` points in degrees.
pub fn haversine_miles(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * h.sqrt().min(1.0).asin()
}

/// Separable correlation `exp(−d/ρ_s)·exp(−|Δt|/ρ_t)`.
pub fn correlation(a: (f64, f64), b: (f64, f64), dt: f64, cfg: &FoldConfig) -> f64 {
    (-haversine_miles(a, b) / cfg.space_range).exp() * (-dt.abs() / cfg.time_range).exp()
}

fn cholesky(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for i in 0..m.nrows() {
        m[(i, i)] += COV_JITTER;
    }
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::invalid("fold covariance is not positive definite"))
}

/// Assigns each cell of each time block to the fold given by the rank of a
/// simulated unit-variance Gaussian field value within its block.
pub fn make_cv_folds(sites: &[(f64, f64)], times: usize, cfg: &FoldConfig) -> Result<FoldPlan> {
    if cfg.k < 2 || cfg.block == 0 || !(cfg.space_range > 0.0 && cfg.time_range > 0.0) {
        return Err(Error::InvalidConfig(format!("invalid fold settings {cfg:?}")));
    }
    let s = sites.len();
    let ls = cholesky(DMatrix::from_fn(s, s, |i, j| {
        (-haversine_miles(sites[i], sites[j]) / cfg.space_range).exp()
    }))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels = vec![0; s * times];
    let mut start = 0;
    while start < times {
        let len = cfg.block.min(times - start);
        let lt = cholesky(DMatrix::from_fn(len, len, |i, j| {
            (-(i as f64 - j as f64).abs() / cfg.time_range).exp()
        }))?;
        let e = DMatrix::from_fn(s, len, |_, _| StandardNormal.sample(&mut rng));
        let z = &ls * e * lt.transpose();
        let n = s * len;
        let mut cells: Vec<(f64, usize)> = (0..len)
            .flat_map(|t| (0..s).map(move |j| (t, j)))
            .map(|(t, j)| (z[(j, t)], (start + t) * s + j))
            .collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (rank, &(_, cell)) in cells.iter().enumerate() {
            labels[cell] = rank * cfg.k / n;
        }
        start += len;
    }
    Ok(FoldPlan { k: cfg.k, labels })
}
