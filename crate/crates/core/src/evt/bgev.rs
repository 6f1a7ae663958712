//! Blended GEV: a Gumbel lower tail spliced onto the Fréchet-type GEV through
//! an incomplete-beta weight on `[b1, b2]`.
//!
//! With the quantile parametrisation every derived quantity (`mu`, `sigma`,
//! `b1`, `b2`, the Gumbel location and scale) is `q + s·k(ξ)` or `s·k(ξ)`, so
//! the law is a location-scale family in `(q, s)`. [`BlendFrame`] holds the
//! shape-dependent constants in standardized units `w = (z − q)/s` and is
//! generic over [`Real`] so the same code yields derivatives.

use serde::{Deserialize, Serialize};

use super::gev::{check_open_unit, gev_quantile, gumbel_quantile, reparam_to_classic, QuantileParams};
use super::special::{beta_pdf, beta_reg};
use crate::autodiff::dual::Real;
use crate::error::{Error, Result};

/// Finite stand-in for `log 0`.
pub const LOG_ZERO: f64 = -1e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BGevConfig {
    pub p_b1: f64,
    pub p_b2: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for BGevConfig {
    fn default() -> Self {
        BGevConfig {
            p_b1: 0.05,
            p_b2: 0.2,
            c1: 5.0,
            c2: 5.0,
        }
    }
}

impl BGevConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_b1 > 0.0 && self.p_b1 < self.p_b2 && self.p_b2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "blend probabilities need 0 < p_b1 < p_b2 < 1 (got {}, {})",
                self.p_b1, self.p_b2
            )));
        }
        if !(self.c1 > 3.0 && self.c2 > 3.0) {
            return Err(Error::InvalidConfig(format!(
                "blend weight shapes need c1, c2 > 3 (got {}, {})",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

/// `log(−log x)`.
fn loglog(x: f64) -> f64 {
    (-x.ln()).ln()
}

/// Shape-dependent constants of the standardized bGEV (requires ξ > 0).
#[derive(Debug, Clone, Copy)]
pub struct BlendFrame<R> {
    pub xi: R,
    pub k_mu: R,
    pub k_sigma: R,
    /// `ξ / k_sigma`, the slope of the GEV support argument in `w`.
    pub slope: R,
    pub k1: R,
    pub k2: R,
    pub mu_g: R,
    pub sigma_g: R,
    c1: f64,
    c2: f64,
}

impl<R: Real> BlendFrame<R> {
    pub fn new(xi: R, alpha: f64, beta: f64, cfg: &BGevConfig) -> Self {
        let lm1 = |x: f64| (xi * (-loglog(x))).exp_m1();
        let den = lm1(1.0 - beta / 2.0) - lm1(beta / 2.0);
        let inv_den = den.recip();
        let em_alpha = lm1(alpha);
        let k_mu = -em_alpha * inv_den;
        let k_sigma = xi * inv_den;
        let k1 = (lm1(cfg.p_b1) - em_alpha) * inv_den;
        let k2 = (lm1(cfg.p_b2) - em_alpha) * inv_den;
        let l1 = loglog(cfg.p_b1);
        let sigma_g = (k2 - k1) / (l1 - loglog(cfg.p_b2));
        let mu_g = k1 + sigma_g * l1;
        BlendFrame {
            xi,
            k_mu,
            k_sigma,
            slope: den,
            k1,
            k2,
            mu_g,
            sigma_g,
            c1: cfg.c1,
            c2: cfg.c2,
        }
    }

    /// `(log G, log(g/G))` of the standardized GEV, `None` off the support.
    pub fn gev_parts(&self, w: R) -> Option<(R, R)> {
        let t = (w - self.k_mu) * self.slope + 1.0;
        if !(t.val() > 0.0) {
            return None;
        }
        let lt = t.ln();
        let log_cdf = -(-lt / self.xi).exp();
        let log_ratio = -self.k_sigma.ln() - lt * (self.xi.recip() + 1.0);
        Some((log_cdf, log_ratio))
    }

    /// `(log G_G, log(g_G/G_G))` of the standardized Gumbel component.
    pub fn gumbel_parts(&self, w: R) -> (R, R) {
        let v = (w - self.mu_g) / self.sigma_g;
        (-(-v).exp(), -self.sigma_g.ln() - v)
    }

    /// `(log G_b(w), log(g_b(w)/G_b(w)))`; the density ratio falls back to
    /// [`LOG_ZERO`] if it is not positive.
    pub fn parts(&self, w: R) -> (R, R) {
        if w.val() <= self.k1.val() {
            return self.gumbel_parts(w);
        }
        // Above b1 the GEV support argument is positive; the fallback only
        // guards against rounding at extreme shapes.
        let Some(fr) = self.gev_parts(w) else {
            return self.gumbel_parts(w);
        };
        if w.val() >= self.k2.val() {
            return fr;
        }
        let (lg_g, lr_g) = self.gumbel_parts(w);
        let (lg_f, lr_f) = fr;
        let width = self.k2 - self.k1;
        let r = (w - self.k1) / width;
        let rv = r.val();
        let dens = beta_pdf(rv, self.c1, self.c2);
        let ddens = dens * ((self.c1 - 1.0) / rv - (self.c2 - 1.0) / (1.0 - rv));
        let p = r.lift(beta_reg(self.c1, self.c2, rv), dens);
        let dp = r.lift(dens, ddens) / width;
        let one_minus_p = -p + 1.0;
        let log_cdf = p * lg_f + one_minus_p * lg_g;
        let ratio = dp * (lg_f - lg_g) + one_minus_p * lr_g.exp() + p * lr_f.exp();
        let log_ratio = if ratio.val() > 0.0 {
            ratio.ln()
        } else {
            R::cst(LOG_ZERO)
        };
        (log_cdf, log_ratio)
    }
}

/// Blend bounds and the continuity-matched Gumbel component in data units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlendDerived {
    pub b1: f64,
    pub b2: f64,
    pub mu_gumbel: f64,
    pub sigma_gumbel: f64,
    /// α-quantile of the Gumbel component.
    pub q_tilde: f64,
    /// β-spread of the Gumbel component.
    pub s_tilde: f64,
}

fn frame_for(q: &QuantileParams, cfg: &BGevConfig) -> Result<BlendFrame<f64>> {
    q.validate()?;
    cfg.validate()?;
    if !(q.xi > 0.0) {
        return Err(Error::invalid(format!("blended GEV needs xi > 0, got {}", q.xi)));
    }
    Ok(BlendFrame::new(q.xi, q.alpha, q.beta, cfg))
}

pub fn blend_derived(q: &QuantileParams, cfg: &BGevConfig) -> Result<BlendDerived> {
    let f = frame_for(q, cfg)?;
    let mu_gumbel = q.q_alpha + q.s_beta * f.mu_g;
    let sigma_gumbel = q.s_beta * f.sigma_g;
    let q_tilde = gumbel_quantile(q.alpha, mu_gumbel, sigma_gumbel)?;
    let s_tilde = gumbel_quantile(1.0 - q.beta / 2.0, mu_gumbel, sigma_gumbel)?
        - gumbel_quantile(q.beta / 2.0, mu_gumbel, sigma_gumbel)?;
    Ok(BlendDerived {
        b1: q.q_alpha + q.s_beta * f.k1,
        b2: q.q_alpha + q.s_beta * f.k2,
        mu_gumbel,
        sigma_gumbel,
        q_tilde,
        s_tilde,
    })
}

pub fn bgev_cdf(z: f64, q: &QuantileParams, cfg: &BGevConfig) -> Result<f64> {
    let f = frame_for(q, cfg)?;
    Ok(f.parts((z - q.q_alpha) / q.s_beta).0.exp())
}

/// Log-density; [`LOG_ZERO`] where the density underflows.
pub fn bgev_logpdf(z: f64, q: &QuantileParams, cfg: &BGevConfig) -> Result<f64> {
    let f = frame_for(q, cfg)?;
    let (lc, lr) = f.parts((z - q.q_alpha) / q.s_beta);
    let v = lc + lr - q.s_beta.ln();
    Ok(if v.is_finite() && lr > LOG_ZERO { v } else { LOG_ZERO })
}

pub fn bgev_quantile(p: f64, q: &QuantileParams, cfg: &BGevConfig) -> Result<f64> {
    check_open_unit(p)?;
    let d = blend_derived(q, cfg)?;
    if p >= cfg.p_b2 {
        return gev_quantile(p, &reparam_to_classic(q)?);
    }
    if p <= cfg.p_b1 {
        return gumbel_quantile(p, d.mu_gumbel, d.sigma_gumbel);
    }
    let f = frame_for(q, cfg)?;
    let cdf = |z: f64| f.parts((z - q.q_alpha) / q.s_beta).0.exp();
    let (mut lo, mut hi) = (d.b1, d.b2);
    if !(cdf(lo) <= p && cdf(hi) >= p) {
        return Err(Error::NotBracketed(format!(
            "probability {p} not within [G_b(b1), G_b(b2)]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::dual::Dual;
    use crate::evt::gev::{gev_cdf, gev_logpdf, gumbel_cdf, gumbel_logpdf};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn std_q() -> QuantileParams {
        QuantileParams::new(0.0, 1.0, 0.2)
    }

    #[test]
    fn derived_reference_values() {
        let d = blend_derived(&std_q(), &BGevConfig::default()).unwrap();
        assert_relative_eq!(d.b1, -0.788_783_452_765_200_6, epsilon = 1e-13);
        assert_relative_eq!(d.b2, -0.481_913_725_993_564_5, epsilon = 1e-13);
        assert_relative_eq!(d.mu_gumbel, -0.246_868_131_855_576_67, epsilon = 1e-13);
        assert_relative_eq!(d.sigma_gumbel, 0.493_912_597_467_847_74, epsilon = 1e-13);
    }

    #[test]
    fn blend_interior_reference_values() {
        let cfg = BGevConfig::default();
        let d = blend_derived(&std_q(), &cfg).unwrap();
        let mid = 0.5 * (d.b1 + d.b2);
        assert_relative_eq!(
            bgev_cdf(mid, &std_q(), &cfg).unwrap(),
            0.112_450_574_049_345_51,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            bgev_logpdf(mid, &std_q(), &cfg).unwrap(),
            -0.661_246_060_204_706_2,
            epsilon = 1e-11
        );
        assert_relative_eq!(
            bgev_quantile(0.1, &std_q(), &cfg).unwrap(),
            -0.660_237_234_857_001_1,
            epsilon = 1e-10
        );
    }

    #[test]
    fn pieces_outside_blend() {
        let cfg = BGevConfig::default();
        let q = QuantileParams::new(1.5, 2.0, 0.3);
        let d = blend_derived(&q, &cfg).unwrap();
        let g = reparam_to_classic(&q).unwrap();
        let above = d.b2 + 1.0;
        assert_relative_eq!(bgev_cdf(above, &q, &cfg).unwrap(), gev_cdf(above, &g), epsilon = 1e-14);
        assert_relative_eq!(bgev_logpdf(above, &q, &cfg).unwrap(), gev_logpdf(above, &g), epsilon = 1e-12);
        let below = d.b1 - 1.0;
        assert_relative_eq!(
            bgev_cdf(below, &q, &cfg).unwrap(),
            gumbel_cdf(below, d.mu_gumbel, d.sigma_gumbel),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            bgev_logpdf(below, &q, &cfg).unwrap(),
            gumbel_logpdf(below, d.mu_gumbel, d.sigma_gumbel),
            epsilon = 1e-12
        );
        assert_relative_eq!(bgev_cdf(d.b1, &q, &cfg).unwrap(), cfg.p_b1, epsilon = 1e-12);
        assert_relative_eq!(bgev_cdf(d.b2, &q, &cfg).unwrap(), cfg.p_b2, epsilon = 1e-12);
        assert_relative_eq!(bgev_quantile(0.5, &q, &cfg).unwrap(), q.q_alpha, epsilon = 1e-12);
        assert_relative_eq!(bgev_quantile(cfg.p_b2, &q, &cfg).unwrap(), d.b2, epsilon = 1e-12);
    }

    #[test]
    fn quantile_matches_grid_inversion() {
        let cfg = BGevConfig::default();
        let d = blend_derived(&std_q(), &cfg).unwrap();
        let n = 200_000;
        let mut found = None;
        for i in 0..=n {
            let z = d.b1 + (d.b2 - d.b1) * i as f64 / n as f64;
            if bgev_cdf(z, &std_q(), &cfg).unwrap() >= 0.1 {
                found = Some(z);
                break;
            }
        }
        let grid = found.unwrap();
        let root = bgev_quantile(0.1, &std_q(), &cfg).unwrap();
        assert!((grid - root).abs() <= (d.b2 - d.b1) / n as f64 + 1e-12);
    }

    #[test]
    fn rejects_bad_config_and_shape() {
        let bad = BGevConfig { p_b1: 0.2, p_b2: 0.2, ..Default::default() };
        assert!(bgev_cdf(0.0, &std_q(), &bad).is_err());
        let bad = BGevConfig { c1: 3.0, ..Default::default() };
        assert!(bgev_cdf(0.0, &std_q(), &bad).is_err());
        assert!(bgev_cdf(0.0, &QuantileParams::new(0.0, 1.0, 0.0), &BGevConfig::default()).is_err());
    }

    #[test]
    fn density_matches_cdf_difference() {
        let cfg = BGevConfig::default();
        let q = QuantileParams::new(0.3, 1.7, 0.35);
        let d = blend_derived(&q, &cfg).unwrap();
        for i in 1..40 {
            let z = d.b1 + (d.b2 - d.b1) * i as f64 / 40.0;
            let h = 1e-6;
            let fd = (bgev_cdf(z + h, &q, &cfg).unwrap() - bgev_cdf(z - h, &q, &cfg).unwrap()) / (2.0 * h);
            let pdf = bgev_logpdf(z, &q, &cfg).unwrap().exp();
            assert!(((fd - pdf) / pdf).abs() < 1e-5, "z={z} fd={fd} pdf={pdf}");
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let cfg = BGevConfig::default();
        let q = QuantileParams::new(0.0, 1.0, 0.2);
        let lo = bgev_quantile(1e-12, &q, &cfg).unwrap();
        // Upper tail handled by the substitution z = b2 + (1 − u)/u on (0, 1].
        let d = blend_derived(&q, &cfg).unwrap();
        let n = 200_000;
        let h = (d.b2 - lo) / n as f64;
        let pdf = |z: f64| bgev_logpdf(z, &q, &cfg).unwrap().exp();
        let mut body = 0.0;
        for i in 0..n {
            body += pdf(lo + (i as f64 + 0.5) * h) * h;
        }
        let m = 400_000;
        let hu = 1.0 / m as f64;
        let mut tail = 0.0;
        for i in 0..m {
            let u = (i as f64 + 0.5) * hu;
            let z = d.b2 + (1.0 - u) / u;
            tail += pdf(z) / (u * u) * hu;
        }
        assert!((body + tail + 1e-12 - 1.0).abs() < 1e-4, "{}", body + tail);
    }

    #[test]
    fn dual_frame_matches_finite_differences() {
        let cfg = BGevConfig::default();
        let eval = |q: f64, s: f64, xi: f64, z: f64| {
            let f = BlendFrame::new(xi, 0.5, 0.5, &cfg);
            let (lc, lr) = f.parts((z - q) / s);
            lc + lr - s.ln()
        };
        for &z in &[-1.5, -0.7, -0.6, -0.5, 0.4, 3.0] {
            let (q0, s0, xi0) = (0.1, 1.1, 0.25);
            let f = BlendFrame::new(Dual::<3>::variable(xi0, 2), 0.5, 0.5, &cfg);
            let w = (Dual::cst(z) - Dual::variable(q0, 0)) / Dual::variable(s0, 1);
            let (lc, lr) = f.parts(w);
            let tot = lc + lr - Dual::variable(s0, 1).ln();
            let h = 1e-6;
            let fds = [
                (eval(q0 + h, s0, xi0, z) - eval(q0 - h, s0, xi0, z)) / (2.0 * h),
                (eval(q0, s0 + h, xi0, z) - eval(q0, s0 - h, xi0, z)) / (2.0 * h),
                (eval(q0, s0, xi0 + h, z) - eval(q0, s0, xi0 - h, z)) / (2.0 * h),
            ];
            for k in 0..3 {
                assert!((tot.d[k] - fds[k]).abs() < 1e-6 * (1.0 + fds[k].abs()), "z={z} k={k}");
            }
        }
    }

    proptest! {
        #[test]
        fn cdf_nondecreasing(q in -5.0f64..5.0, s in 0.1f64..5.0, xi in 0.01f64..0.95) {
            let qp = QuantileParams::new(q, s, xi);
            let cfg = BGevConfig::default();
            let d = blend_derived(&qp, &cfg).unwrap();
            let (lo, hi) = (d.b1 - 5.0 * s, d.b2 + 5.0 * s);
            let mut prev = 0.0;
            for i in 0..=2000 {
                let z = lo + (hi - lo) * i as f64 / 2000.0;
                let c = bgev_cdf(z, &qp, &cfg).unwrap();
                prop_assert!(c >= prev);
                prev = c;
            }
        }

        #[test]
        fn quantile_inverts_cdf(q in -5.0f64..5.0, s in 0.1f64..5.0, xi in 0.01f64..0.95,
                                p in 1e-4f64..0.9999) {
            let qp = QuantileParams::new(q, s, xi);
            let cfg = BGevConfig::default();
            let z = bgev_quantile(p, &qp, &cfg).unwrap();
            prop_assert!((bgev_cdf(z, &qp, &cfg).unwrap() - p).abs() < 1e-10);
        }
    }
}
