//! Forecast scores: twCRPS, sMAD, stLS, centered integrated squared error,
//! exponential-margin PIT and AIC.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::evt::{BlendFrame, PpContext};
use crate::pinn::spline::quantile_sorted;

/// Upper clamp applied to cdf values before the exponential transform.
pub const PIT_CLAMP: f64 = 1.0 - 1e-12;
/// Right end of the stLS integration grid.
pub const STLS_TOP: f64 = 0.9999;

/// 24 thresholds geometrically spaced on the original scale between 30 and
/// 100 000, square-rooted to the modelling scale.
pub fn default_thresholds() -> Vec<f64> {
    let (lo, hi) = (30f64.ln(), 100_000f64.ln());
    (0..24).map(|i| (lo + (hi - lo) * i as f64 / 23.0).exp().sqrt()).collect()
}

fn raw_weight(x: f64) -> f64 {
    1.0 - (1.0 + (x + 1.0).powi(2) / 1000.0).powf(-0.25)
}

/// Threshold weight normalized to 1 at `v_max`.
pub fn twcrps_weight(x: f64, v_max: f64) -> f64 {
    raw_weight(x) / raw_weight(v_max)
}

/// `Σ_cells Σ_i w(v_i)[1{y ≤ v_i} − p̂(v_i)]²` over observed cells; `probs`
/// holds one row of forecast probabilities per cell, aligned with
/// `thresholds`.
pub fn twcrps(y: &[f64], observed: &[bool], probs: &[Vec<f64>], thresholds: &[f64]) -> Result<f64> {
    if probs.len() != y.len() || observed.len() != y.len() {
        return Err(Error::Shape("twCRPS inputs differ in length".into()));
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) || thresholds.is_empty() {
        return Err(Error::invalid("twCRPS thresholds must be increasing"));
    }
    let v_max = *thresholds.last().expect("non-empty");
    let w: Vec<f64> = thresholds.iter().map(|&v| twcrps_weight(v, v_max)).collect();
    let mut total = 0.0;
    for i in 0..y.len() {
        if !observed[i] {
            continue;
        }
        let p = &probs[i];
        if p.len() != thresholds.len() {
            return Err(Error::Shape(format!("cell {i} has {} forecast probabilities", p.len())));
        }
        if p.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::NonMonotoneForecast(i));
        }
        for (j, &v) in thresholds.iter().enumerate() {
            let ind = if y[i] <= v { 1.0 } else { 0.0 };
            total += w[j] * (ind - p[j]).powi(2);
        }
    }
    Ok(total)
}

/// Log of the blended-GEV point-process distribution function
/// `G_b(z)^{1/n_y}`.
pub fn pp_log_cdf(z: f64, q: f64, s: f64, xi: f64, ctx: &PpContext) -> f64 {
    let frame = ctx.frame(xi);
    frame.parts((z - q) / s).0 / ctx.n_y
}

pub fn pp_cdf(z: f64, q: f64, s: f64, xi: f64, ctx: &PpContext) -> f64 {
    pp_log_cdf(z, q, s, xi, ctx).exp()
}

/// `log(1 − G_b(z)^{1/n_y})`, accurate in the far tail.
pub fn pp_log_survival(z: f64, q: f64, s: f64, xi: f64, ctx: &PpContext) -> f64 {
    (-pp_log_cdf(z, q, s, xi, ctx).exp_m1()).ln()
}

/// Shared-frame evaluation for many cells at one shape.
pub struct PpForecast<'a> {
    frame: BlendFrame<f64>,
    ctx: &'a PpContext,
}

impl<'a> PpForecast<'a> {
    pub fn new(xi: f64, ctx: &'a PpContext) -> Self {
        PpForecast { frame: ctx.frame(xi), ctx }
    }

    pub fn log_cdf(&self, z: f64, q: f64, s: f64) -> f64 {
        self.frame.parts((z - q) / s).0 / self.ctx.n_y
    }

    pub fn cdf(&self, z: f64, q: f64, s: f64) -> f64 {
        self.log_cdf(z, q, s).exp()
    }

    pub fn log_survival(&self, z: f64, q: f64, s: f64) -> f64 {
        (-self.log_cdf(z, q, s).exp_m1()).ln()
    }
}

/// `−log(1 − F)` with `F` clamped below 1.
pub fn pit_exponential(f: f64) -> f64 {
    -(-f.clamp(0.0, PIT_CLAMP)).ln_1p()
}

/// Probability grid `p_j = p₁ + (j−1)(1−p₁)/m`, `j = 1..m`.
pub fn smad_grid(p1: f64, m: usize) -> Vec<f64> {
    (0..m).map(|j| p1 + j as f64 * (1.0 - p1) / m as f64).collect()
}

/// Default grid size `(1 − p₁)·n`.
pub fn smad_default_m(p1: f64, n: usize) -> usize {
    ((1.0 - p1) * n as f64).round() as usize
}

/// Q-Q pairs `(F_E⁻¹(p_j), q̃(p_j))` of data on standard exponential
/// margins against the exponential quantiles.
pub fn qq_exponential(z: &[f64], p1: f64, m: usize) -> Result<Vec<(f64, f64)>> {
    if m < 2 {
        return Err(Error::invalid(format!("sMAD grid needs at least 2 points, got {m}")));
    }
    if z.is_empty() {
        return Err(Error::invalid("sMAD needs data"));
    }
    let mut s = z.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(smad_grid(p1, m).into_iter().map(|p| (-(-p).ln_1p(), quantile_sorted(&s, p))).collect())
}

/// Mean absolute deviation of the upper-tail Q-Q plot from the diagonal.
pub fn smad(z: &[f64], p1: f64, m: Option<usize>) -> Result<f64> {
    let m = m.unwrap_or_else(|| smad_default_m(p1, z.len()));
    let qq = qq_exponential(z, p1, m)?;
    Ok(qq.iter().map(|(t, e)| (e - t).abs()).sum::<f64>() / m as f64)
}

/// `(1/n) Σ_i ∫_{p₋}^1 (log(1 − F̂_i(F̃_i⁻¹(p))) − log(1 − p))² dp`.
/// `log_surv(i, p)` returns `log(1 − F̂_i(F̃_i⁻¹(p)))`. The integral uses
/// the trapezoidal rule on `points` equally spaced values in
/// `[p₋, 0.9999]`; the remaining sliver up to 1 takes the integrand at
/// 0.9999.
pub fn stls(cells: usize, p_minus: f64, points: usize, mut log_surv: impl FnMut(usize, f64) -> f64) -> Result<f64> {
    if !(0.0..STLS_TOP).contains(&p_minus) || points < 2 {
        return Err(Error::invalid(format!("stLS needs p₋ in [0, {STLS_TOP}) and at least 2 points")));
    }
    if cells == 0 {
        return Err(Error::invalid("stLS needs at least one cell"));
    }
    let h = (STLS_TOP - p_minus) / (points - 1) as f64;
    let mut total = 0.0;
    for i in 0..cells {
        let mut integral = 0.0;
        let mut last = 0.0;
        for j in 0..points {
            let p = if j + 1 == points { STLS_TOP } else { p_minus + j as f64 * h };
            let ls = log_surv(i, p);
            if !ls.is_finite() {
                return Err(Error::Domain { cell: i, detail: format!("forecast survival vanishes at p = {p}") });
            }
            let v = (ls - (-p).ln_1p()).powi(2);
            integral += if j == 0 || j + 1 == points { 0.5 * h * v } else { h * v };
            last = v;
        }
        total += integral + (1.0 - STLS_TOP) * last;
    }
    Ok(total / cells as f64)
}

/// Quantiles of the standard normal at `p_i = i/(count+1)`.
pub fn normal_grid(count: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (1..=count).map(|i| n.inverse_cdf(i as f64 / (count + 1) as f64)).collect()
}

/// Trapezoidal `∫{[m(x)−m(0)] − [m̂(x)−m̂(0)]}² dx` over the sorted grid
/// `xs`, from values `m` and `m_hat` on the grid and at zero.
pub fn centered_ise(xs: &[f64], m: &[f64], m0: f64, m_hat: &[f64], m_hat0: f64) -> f64 {
    let f: Vec<f64> = (0..xs.len()).map(|i| ((m[i] - m0) - (m_hat[i] - m_hat0)).powi(2)).collect();
    xs.windows(2).enumerate().map(|(i, w)| 0.5 * (w[1] - w[0]) * (f[i] + f[i + 1])).sum()
}

/// `2k + 2·nll`.
pub fn aic(nll: f64, k: usize) -> f64 {
    2.0 * k as f64 + 2.0 * nll
}

/// Scores reported for one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScorePanel {
    pub parameters: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub aic: f64,
    pub smad_in: Option<f64>,
    pub smad_out: Option<f64>,
    pub twcrps: Option<f64>,
    pub stls: Option<f64>,
}
