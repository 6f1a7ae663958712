//! GEV, Gumbel and GPD distributions and the quantile/spread parametrisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape magnitudes below this are treated as the Gumbel (ξ = 0) limit.
pub const XI_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !xi.is_finite() {
            return Err(Error::invalid(format!(
                "GEV needs finite mu, xi and sigma > 0 (got mu={mu}, sigma={sigma}, xi={xi})"
            )));
        }
        Ok(GevParams { mu, sigma, xi })
    }

    /// `1 + ξ(z − μ)/σ`; the support is where this is positive.
    pub fn support_arg(&self, z: f64) -> f64 {
        1.0 + self.xi * (z - self.mu) / self.sigma
    }

    /// Lower endpoint for ξ > 0, upper endpoint for ξ < 0, `None` for ξ = 0.
    pub fn endpoint(&self) -> Option<f64> {
        if self.xi.abs() < XI_ZERO {
            None
        } else {
            Some(self.mu - self.sigma / self.xi)
        }
    }
}

/// `−log G(z)`, infinite below the lower endpoint and zero above the upper one.
fn neg_log_cdf(z: f64, p: &GevParams) -> f64 {
    let x = (z - p.mu) / p.sigma;
    if p.xi.abs() < XI_ZERO {
        return (-x).exp();
    }
    let t = 1.0 + p.xi * x;
    if t <= 0.0 {
        return if p.xi > 0.0 { f64::INFINITY } else { 0.0 };
    }
    (-t.ln() / p.xi).exp()
}

pub fn gev_cdf(z: f64, p: &GevParams) -> f64 {
    (-neg_log_cdf(z, p)).exp()
}

/// Log-density; `f64::NEG_INFINITY` off the support.
pub fn gev_logpdf(z: f64, p: &GevParams) -> f64 {
    let x = (z - p.mu) / p.sigma;
    if p.xi.abs() < XI_ZERO {
        return -p.sigma.ln() - x - (-x).exp();
    }
    let t = 1.0 + p.xi * x;
    if t <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let lt = t.ln();
    -p.sigma.ln() - (1.0 / p.xi + 1.0) * lt - (-lt / p.xi).exp()
}

pub fn gev_quantile(prob: f64, p: &GevParams) -> Result<f64> {
    check_open_unit(prob)?;
    let y = -prob.ln();
    if p.xi.abs() < XI_ZERO {
        return Ok(p.mu - p.sigma * y.ln());
    }
    Ok(p.mu + p.sigma * (-p.xi * y.ln()).exp_m1() / p.xi)
}

pub fn gumbel_cdf(z: f64, mu: f64, sigma: f64) -> f64 {
    (-(-(z - mu) / sigma).exp()).exp()
}

pub fn gumbel_logpdf(z: f64, mu: f64, sigma: f64) -> f64 {
    let x = (z - mu) / sigma;
    -sigma.ln() - x - (-x).exp()
}

pub fn gumbel_quantile(prob: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_open_unit(prob)?;
    Ok(mu - sigma * (-prob.ln()).ln())
}

pub(crate) fn check_open_unit(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("probability {p} outside (0, 1)")))
    }
}

/// GEV in terms of its α-quantile `q_alpha` and β-spread
/// `s_beta = q_{1−β/2} − q_{β/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileParams {
    pub q_alpha: f64,
    pub s_beta: f64,
    pub xi: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl QuantileParams {
    /// Median/IQR-style parametrisation with α = β = 0.5.
    pub fn new(q_alpha: f64, s_beta: f64, xi: f64) -> Self {
        QuantileParams {
            q_alpha,
            s_beta,
            xi,
            alpha: 0.5,
            beta: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_beta > 0.0) {
            return Err(Error::invalid(format!("s_beta must be > 0, got {}", self.s_beta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!(
                "alpha and beta must lie in (0, 1), got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !self.q_alpha.is_finite() || !self.xi.is_finite() {
            return Err(Error::invalid("q_alpha and xi must be finite"));
        }
        Ok(())
    }
}

/// Location/scale offsets `(k_mu, k_sigma)` so that `mu = q + s·k_mu` and
/// `sigma = s·k_sigma` for a given shape.
pub fn reparam_factors(xi: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let lo = beta / 2.0;
    let hi = 1.0 - beta / 2.0;
    if xi.abs() < XI_ZERO {
        let l = |x: f64| (-x.ln()).ln();
        let den = l(lo) - l(hi);
        (l(alpha) / den, 1.0 / den)
    } else {
        // l_{x,ξ} − 1 via expm1 keeps the map smooth as ξ → 0.
        let lm1 = |x: f64| (-xi * (-x.ln()).ln()).exp_m1();
        let den = lm1(hi) - lm1(lo);
        (-lm1(alpha) / den, xi / den)
    }
}

pub fn reparam_to_classic(q: &QuantileParams) -> Result<GevParams> {
    q.validate()?;
    let (k_mu, k_sigma) = reparam_factors(q.xi, q.alpha, q.beta);
    GevParams::new(q.q_alpha + q.s_beta * k_mu, q.s_beta * k_sigma, q.xi)
}

/// Inverse map, used for round-trip checks and reporting.
pub fn classic_to_reparam(p: &GevParams, alpha: f64, beta: f64) -> Result<QuantileParams> {
    let q_alpha = gev_quantile(alpha, p)?;
    let s_beta = gev_quantile(1.0 - beta / 2.0, p)? - gev_quantile(beta / 2.0, p)?;
    Ok(QuantileParams {
        q_alpha,
        s_beta,
        xi: p.xi,
        alpha,
        beta,
    })
}

/// Generalised Pareto law of threshold excesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub sigma_u: f64,
    pub xi: f64,
}

impl GpdParams {
    pub fn new(sigma_u: f64, xi: f64) -> Result<Self> {
        if !(sigma_u > 0.0) || !xi.is_finite() {
            return Err(Error::invalid(format!(
                "GPD needs sigma_u > 0 and finite xi (got {sigma_u}, {xi})"
            )));
        }
        Ok(GpdParams { sigma_u, xi })
    }

    /// Threshold-dependent scale `σ + ξ(u − μ)` of the excess law implied by a GEV.
    pub fn from_gev(gev: &GevParams, u: f64) -> Result<Self> {
        GpdParams::new(gev.sigma + gev.xi * (u - gev.mu), gev.xi)
    }

    pub fn upper_endpoint(&self) -> f64 {
        if self.xi < 0.0 {
            -self.sigma_u / self.xi
        } else {
            f64::INFINITY
        }
    }
}

pub fn gpd_cdf(z: f64, p: &GpdParams) -> Result<f64> {
    if !(z >= 0.0) || z > p.upper_endpoint() {
        return Err(Error::invalid(format!("excess {z} outside the GPD support")));
    }
    if p.xi == 0.0 {
        return Ok(-(-z / p.sigma_u).exp_m1());
    }
    Ok(-(-(p.xi * z / p.sigma_u).ln_1p() / p.xi).exp_m1())
}

pub fn gpd_quantile(prob: f64, p: &GpdParams) -> Result<f64> {
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::invalid(format!("probability {prob} outside [0, 1)")));
    }
    let ls = (-prob).ln_1p();
    if p.xi == 0.0 {
        return Ok(-p.sigma_u * ls);
    }
    Ok(p.sigma_u * (-p.xi * ls).exp_m1() / p.xi)
}
