//! Synthetic studies: correlated Gaussian predictors, non-additive test
//! functions, and responses from the point-process law or from
//! deliberately misspecified laws.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evt::{gev_cdf, gev_quantile, gpd_quantile, reparam_to_classic, GevParams, GpdParams, QuantileParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// Cubic additive and two-term linear effects on both parameters.
    Recovery1,
    /// As `Recovery1` with the effects of x₇ and x₉ removed.
    Recovery2,
    /// Log-normal responses (Gumbel domain of attraction).
    Lognormal,
    /// Generalized Pareto responses.
    Gpd,
    /// Point-process responses with linear parameter surfaces.
    Linear,
    /// Point-process responses with cubic-polynomial additive surfaces.
    Additive,
    /// Point-process responses with non-additive surfaces.
    Nonlinear,
}

impl Study {
    pub fn default_dim(self) -> usize {
        match self {
            Study::Linear | Study::Additive | Study::Nonlinear => 12,
            _ => 10,
        }
    }

    pub fn default_rho(self) -> f64 {
        match self {
            Study::Recovery1 | Study::Recovery2 => 0.5,
            _ => 0.3,
        }
    }

    /// Probability level of the known threshold.
    pub fn threshold_prob(self) -> f64 {
        match self {
            Study::Linear | Study::Additive | Study::Nonlinear => 0.95,
            _ => 0.99,
        }
    }

    /// Location and log-spread intercepts of the point-process truth.
    pub fn intercepts(self) -> Option<[f64; 2]> {
        match self {
            Study::Recovery1 | Study::Recovery2 => Some(RECOVERY_INTERCEPTS),
            Study::Linear => Some([1.0, 0.5]),
            Study::Additive => Some([15.0, 1.0]),
            Study::Nonlinear => Some([20.0, 0.5]),
            _ => None,
        }
    }

    /// Shape of the point-process truth, if any.
    pub fn true_xi(self) -> Option<f64> {
        match self {
            Study::Recovery1 | Study::Recovery2 => Some(0.2),
            Study::Linear | Study::Additive | Study::Nonlinear => Some(0.25),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub study: Study,
    pub n: usize,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the random-but-fixed coefficient vectors of the linear and
    /// additive point-process studies; kept apart from `seed` so that
    /// replicate sets share them.
    #[serde(default)]
    pub coef_seed: u64,
}

impl ScenarioSpec {
    pub fn new(study: Study, n: usize, seed: u64) -> Self {
        ScenarioSpec { study, n, d: None, rho: None, seed, coef_seed: 0 }
    }

    pub fn dim(&self) -> usize {
        self.d.unwrap_or(self.study.default_dim())
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or(self.study.default_rho())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let rho = self.rho();
        if self.n == 0 || d == 0 {
            return Err(Error::InvalidConfig("scenario needs n >= 1 and d >= 1".into()));
        }
        let lo = if d > 1 { -1.0 / (d as f64 - 1.0) } else { -1.0 };
        if !(rho > lo && rho < 1.0) {
            return Err(Error::InvalidConfig(format!("correlation {rho} outside ({lo}, 1)")));
        }
        if d < self.study.default_dim() {
            return Err(Error::InvalidConfig(format!(
                "{:?} uses {} predictors, got d = {d}",
                self.study,
                self.study.default_dim()
            )));
        }
        Ok(())
    }
}

/// Conditional law of the response in one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CellLaw {
    /// GEV marginal of the point process with one block per observation.
    Pp(QuantileParams),
    LogNormal { mu: f64, sigma: f64 },
    Gpd(GpdParams),
}

impl CellLaw {
    pub fn quantile(&self, p: f64) -> Result<f64> {
        match self {
            CellLaw::Pp(q) => gev_quantile(p, &reparam_to_classic(q)?),
            CellLaw::LogNormal { mu, sigma } => {
                let n = Normal::new(*mu, *sigma).map_err(|e| Error::invalid(e.to_string()))?;
                Ok(n.inverse_cdf(p).exp())
            }
            CellLaw::Gpd(g) => gpd_quantile(p, g),
        }
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct SimData {
    pub spec: ScenarioSpec,
    pub x: Tensor,
    pub y: Vec<f64>,
    /// Known threshold: the `threshold_prob` quantile of each cell's law.
    pub u: Vec<f64>,
    pub laws: Vec<CellLaw>,
    /// Fixed coefficient vectors, when the study uses them.
    pub coefficients: Vec<Vec<f64>>,
}

impl SimData {
    pub fn exceedance_rate(&self) -> f64 {
        self.y.iter().zip(&self.u).filter(|(y, u)| y > u).count() as f64 / self.y.len() as f64
    }
}

/// Rows of standard Gaussians with all pairwise correlations `rho`.
pub fn sample_predictors(n: usize, d: usize, rho: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let corr = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
    let l = corr
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig(format!("correlation {rho} is not valid for d = {d}")))?
        .l();
    let mut data = vec![0.0; n * d];
    let mut z = vec![0.0; d];
    for r in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        for i in 0..d {
            data[r * d + i] = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
        }
    }
    Tensor::new(n, d, data)
}

/// First non-additive test function of x₁..x₆.
pub fn m_n1(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4, x5, x6) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let s: f64 = x[..6].iter().sum::<f64>() / 10.0;
    0.1 * (x1 * x2
        + x2 * (1.0 - (std::f64::consts::PI * x2 * x3).cos())
        + 2.0 * x3.sin() / ((x3 - x4).abs() + 2.0)
        + 0.2 * (x4 + x4 * x5 / 2.0).powi(2)
        - (x5 * x5 + x6 * x6 + 2.0).sqrt()
        + (-12.0 + s).exp())
}

/// Second non-additive test function of x₁..x₆.
pub fn m_n2(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
    let s: f64 = x[..6].iter().sum::<f64>() / 10.0;
    0.1 * (0.7 * x1 * x2 - 5.0
        + x2 * (1.0 - (std::f64::consts::PI * x2 * x3).cos())
        + 3.0 * x3.sin() / ((x3 - x4).abs() + 2.0)
        + 0.2 * (x4 + x4 * x5 / 2.0 - 1.0).powi(2)
        + (-18.0 + s).exp())
}

/// Recovery-study intercepts of the location and (log) spread.
pub const RECOVERY_INTERCEPTS: [f64; 2] = [1.0, -0.5];

/// Linear coefficients on (x₇, x₈) for surface `which` (0 location, 1 spread).
pub fn recovery_linear(study: Study, which: usize) -> [f64; 2] {
    match (study, which) {
        (Study::Recovery1, 0) => [0.8, 2.0],
        (Study::Recovery1, _) => [0.4, -0.2],
        (_, 0) => [0.0, -0.5],
        (_, _) => [0.0, 0.3],
    }
}

/// Additive effect of x₉ (`slot` 0) or x₁₀ (`slot` 1) on surface `which`.
pub fn recovery_additive(study: Study, which: usize, slot: usize, x: f64) -> f64 {
    let (x2, x3) = (x * x, x * x * x);
    match (study, which, slot) {
        (Study::Recovery1, 0, 0) => 0.2 * (0.1 * x3 - x2 + x),
        (Study::Recovery1, 0, _) => 0.2 * (0.4 * x3 - 2.0 * x),
        (Study::Recovery1, _, 0) => 0.2 * (0.2 * x3 - 0.3 * x2 + x),
        (Study::Recovery1, _, _) => 0.2 * (-0.1 * x3 + 0.2 * x2 - 0.5 * x),
        (_, 0, 0) => 0.0,
        (_, 0, _) => x,
        (_, _, 0) => 0.0,
        (_, _, _) => 0.2 * (0.1 * x3 - 0.3 * x2 - x),
    }
}

fn grid_draws(rng: &mut ChaCha8Rng, count: usize, half: f64) -> Vec<f64> {
    // {−half, −half + 0.1, ..., half}
    let steps = (2.0 * half / 0.1).round() as i64;
    (0..count).map(|_| rng.gen_range(0..=steps) as f64 * 0.1 - half).collect()
}

fn cubic_features(x: &[f64]) -> Vec<f64> {
    x.iter().flat_map(|&v| [v * v * v, v * v, v]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn padded(x: &[f64]) -> [f64; 6] {
    let mut out = [0.0; 6];
    out.copy_from_slice(&x[..6]);
    out
}

/// Location and spread of the point-process truth at `x`.
fn pp_surfaces(study: Study, x: &[f64], coef: &[Vec<f64>]) -> (f64, f64) {
    match study {
        Study::Recovery1 | Study::Recovery2 => {
            let l = |w| {
                let c = recovery_linear(study, w);
                c[0] * x[6] + c[1] * x[7]
            };
            let a = |w| recovery_additive(study, w, 0, x[8]) + recovery_additive(study, w, 1, x[9]);
            let q = RECOVERY_INTERCEPTS[0] + l(0) + a(0) + m_n1(x);
            let s = (RECOVERY_INTERCEPTS[1] + l(1) + a(1) + m_n2(x)).exp();
            (q, s)
        }
        Study::Linear => (1.0 + dot(&x[..12], &coef[0]), (0.5 + dot(&x[..12], &coef[1])).exp()),
        Study::Additive => {
            let xs = cubic_features(&x[..12]);
            (15.0 + dot(&xs, &coef[0]), (1.0 - 0.05 * dot(&xs, &coef[1])).exp())
        }
        Study::Nonlinear => {
            let (a, b) = (padded(&x[..6]), padded(&x[6..12]));
            let q = 20.0 + 25.0 * (m_n1(&a) + m_n1(&b).abs());
            let s = (0.5 - (m_n2(&a) - m_n2(&b))).exp();
            (q, s)
        }
        Study::Lognormal | Study::Gpd => unreachable!("not a point-process study"),
    }
}

/// Fixed coefficient vectors of the linear and additive studies.
pub fn study_coefficients(study: Study, coef_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(coef_seed);
    match study {
        Study::Linear => vec![grid_draws(&mut rng, 12, 1.0), grid_draws(&mut rng, 12, 0.5)],
        Study::Additive => vec![grid_draws(&mut rng, 36, 1.0), grid_draws(&mut rng, 36, 0.5)],
        _ => Vec::new(),
    }
}

/// Draw from the point-process law with one block per observation: with
/// probability `1 − p_u` an exceedance with survivor `log G(y)/log G(u)`,
/// otherwise a draw from the GEV restricted below `u`.
pub fn sample_pp_response(law: &QuantileParams, p_u: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let g = reparam_to_classic(law)?;
    let w: f64 = rng.gen();
    let p = if w > p_u {
        let v: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        p_u.powf(v)
    } else {
        w.max(f64::MIN_POSITIVE)
    };
    gev_quantile(p.min(1.0 - f64::EPSILON), &g)
}

/// Exceedance survivor `log G(y)/log G(u)` of the point-process law.
pub fn pp_exceedance_survivor(y: f64, u: f64, g: &GevParams) -> f64 {
    gev_cdf(y, g).ln() / gev_cdf(u, g).ln()
}

/// Simulates a data set for `spec`.
pub fn simulate(spec: &ScenarioSpec) -> Result<SimData> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = sample_predictors(n, d, spec.rho(), &mut rng)?;
    let coefficients = study_coefficients(spec.study, spec.coef_seed);
    let p_u = spec.study.threshold_prob();
    let mut y = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut laws = Vec::with_capacity(n);
    for r in 0..n {
        let xr = x.row(r);
        let law = match spec.study {
            Study::Lognormal => CellLaw::LogNormal { mu: 6.0 + 0.2 * m_n1(xr), sigma: 0.5 },
            Study::Gpd => CellLaw::Gpd(GpdParams::new((0.5 - 3.0 * m_n2(xr)).exp(), 0.1)?),
            study => {
                let (q, s) = pp_surfaces(study, xr, &coefficients);
                CellLaw::Pp(QuantileParams::new(q, s, study.true_xi().expect("point-process study")))
            }
        };
        let yr = match &law {
            CellLaw::Pp(q) => sample_pp_response(q, p_u, &mut rng)?,
            other => other.quantile(rng.gen_range(f64::MIN_POSITIVE..1.0))?,
        };
        u.push(law.quantile(p_u)?);
        y.push(yr);
        laws.push(law);
    }
    Ok(SimData { spec: *spec, x, y, u, laws, coefficients })
}
