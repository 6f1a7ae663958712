//! Point-process likelihood for threshold exceedances.
//!
//! Per observed cell the negative log-likelihood contribution is
//! `(1/n_y)·(−log G(u)) − 1{y > u}·log(g(y)/G(y))`, with `G` either the GEV
//! or the blended GEV. Constants that do not depend on the parameters are
//! dropped.

use serde::{Deserialize, Serialize};

use super::bgev::{BGevConfig, BlendFrame};
use crate::autodiff::dual::{Dual, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PpVariant {
    Gev,
    Bgev,
}

/// Likelihood settings shared by every cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpContext {
    /// Number of observations per block (year).
    pub n_y: f64,
    pub alpha: f64,
    pub beta: f64,
    pub blend: BGevConfig,
}

impl Default for PpContext {
    fn default() -> Self {
        PpContext {
            n_y: 1.0,
            alpha: 0.5,
            beta: 0.5,
            blend: BGevConfig::default(),
        }
    }
}

impl PpContext {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_y >= 1.0) {
            return Err(Error::InvalidConfig(format!("n_y must be >= 1, got {}", self.n_y)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidConfig("alpha and beta must lie in (0, 1)".into()));
        }
        self.blend.validate()
    }

    pub fn frame<R: Real>(&self, xi: R) -> BlendFrame<R> {
        BlendFrame::new(xi, self.alpha, self.beta, &self.blend)
    }
}

/// Parameter grids aligned with the response: location and spread per cell,
/// one shared shape.
#[derive(Debug, Clone, Copy)]
pub struct PpTheta<'a> {
    pub q: &'a [f64],
    pub s: &'a [f64],
    pub xi: f64,
}

/// One cell's contribution. `Err` carries a description when the GEV
/// variant is evaluated off its support.
#[inline]
pub fn pp_cell<R: Real>(
    frame: &BlendFrame<R>,
    variant: PpVariant,
    inv_ny: f64,
    q: R,
    s: R,
    u: f64,
    y: f64,
) -> std::result::Result<R, &'static str> {
    let inv_s = s.recip();
    let wu = (-q + u) * inv_s;
    let (log_gu, exceed_term) = match variant {
        PpVariant::Bgev => {
            let log_gu = frame.parts(wu).0;
            let ex = if y > u {
                let lr = frame.parts((-q + y) * inv_s).1;
                Some(lr + inv_s.ln())
            } else {
                None
            };
            (log_gu, ex)
        }
        PpVariant::Gev => {
            let log_gu = frame.gev_parts(wu).ok_or("threshold below the GEV lower endpoint")?.0;
            let ex = if y > u {
                let lr = frame
                    .gev_parts((-q + y) * inv_s)
                    .ok_or("observation below the GEV lower endpoint")?
                    .1;
                Some(lr + inv_s.ln())
            } else {
                None
            };
            (log_gu, ex)
        }
    };
    let mut v = -log_gu * inv_ny;
    if let Some(t) = exceed_term {
        v = v - t;
    }
    Ok(v)
}

fn check_lengths(y: &[f64], observed: &[bool], u: &[f64], theta: &PpTheta) -> Result<()> {
    let n = y.len();
    if observed.len() != n || u.len() != n || theta.q.len() != n || theta.s.len() != n {
        return Err(Error::Shape(format!(
            "pp likelihood inputs disagree in length (y {}, mask {}, u {}, q {}, s {})",
            n,
            observed.len(),
            u.len(),
            theta.q.len(),
            theta.s.len()
        )));
    }
    Ok(())
}

fn check_cell(variant: PpVariant, observed: bool, u: f64, y: f64, i: usize) -> Result<()> {
    if observed && (!u.is_finite() || y.is_nan()) {
        return Err(Error::Domain {
            cell: i,
            detail: "observed cell without a finite threshold or response".into(),
        });
    }
    let _ = variant;
    Ok(())
}

fn check_xi(variant: PpVariant, xi: f64) -> Result<()> {
    let ok = match variant {
        PpVariant::Bgev => xi > 0.0 && xi < 1.0,
        PpVariant::Gev => xi > 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("shape {xi} outside the admissible range")))
    }
}

/// Summed negative log-likelihood over observed cells; masked cells
/// contribute exactly zero.
pub fn pp_nll(
    y: &[f64],
    observed: &[bool],
    u: &[f64],
    theta: &PpTheta,
    ctx: &PpContext,
    variant: PpVariant,
) -> Result<f64> {
    ctx.validate()?;
    check_lengths(y, observed, u, theta)?;
    check_xi(variant, theta.xi)?;
    let frame = ctx.frame(theta.xi);
    let inv_ny = 1.0 / ctx.n_y;
    let mut total = 0.0;
    for i in 0..y.len() {
        check_cell(variant, observed[i], u[i], y[i], i)?;
        if !observed[i] {
            continue;
        }
        total += pp_cell(&frame, variant, inv_ny, theta.q[i], theta.s[i], u[i], y[i])
            .map_err(|d| Error::Domain { cell: i, detail: d.into() })?;
    }
    Ok(total)
}

/// Likelihood value together with per-cell partials with respect to `q` and
/// `s` (written into `dq`, `ds`, zero for masked cells) and the total
/// partial with respect to the shared shape.
#[allow(clippy::too_many_arguments)]
pub fn pp_nll_with_grad(
    y: &[f64],
    observed: &[bool],
    u: &[f64],
    theta: &PpTheta,
    ctx: &PpContext,
    variant: PpVariant,
    dq: &mut [f64],
    ds: &mut [f64],
) -> Result<(f64, f64)> {
    ctx.validate()?;
    check_lengths(y, observed, u, theta)?;
    check_xi(variant, theta.xi)?;
    if dq.len() != y.len() || ds.len() != y.len() {
        return Err(Error::Shape("gradient buffers disagree with data length".into()));
    }
    let frame = ctx.frame(Dual::<3>::variable(theta.xi, 2));
    let inv_ny = 1.0 / ctx.n_y;
    let mut total = 0.0;
    let mut dxi = 0.0;
    for i in 0..y.len() {
        check_cell(variant, observed[i], u[i], y[i], i)?;
        if !observed[i] {
            dq[i] = 0.0;
            ds[i] = 0.0;
            continue;
        }
        let v = pp_cell(
            &frame,
            variant,
            inv_ny,
            Dual::variable(theta.q[i], 0),
            Dual::variable(theta.s[i], 1),
            u[i],
            y[i],
        )
        .map_err(|d| Error::Domain { cell: i, detail: d.into() })?;
        total += v.v;
        dq[i] = v.d[0];
        ds[i] = v.d[1];
        dxi += v.d[2];
    }
    Ok((total, dxi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evt::bgev::{bgev_cdf, bgev_logpdf, bgev_quantile, blend_derived};
    use crate::evt::gev::QuantileParams;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn ctx() -> PpContext {
        PpContext::default()
    }

    fn one(y: f64, u: f64, q: f64, s: f64, xi: f64, variant: PpVariant) -> Result<f64> {
        pp_nll(&[y], &[true], &[u], &PpTheta { q: &[q], s: &[s], xi }, &ctx(), variant)
    }

    #[test]
    fn single_exceedance_reference_values() {
        assert_relative_eq!(
            one(3.0, 1.0, 0.0, 1.0, 0.2, PpVariant::Bgev).unwrap(),
            4.116_546_563_447_432_6,
            epsilon = 1e-12
        );
        let b1 = -0.788_783_452_765_200_6;
        let mid = -0.635_348_589_379_382_5;
        assert_relative_eq!(
            one(mid, b1 - 0.5, 0.0, 1.0, 0.2, PpVariant::Bgev).unwrap(),
            6.720_234_535_304_948,
            epsilon = 1e-10
        );
    }

    #[test]
    fn composed_from_cdf_and_density() {
        let q = QuantileParams::new(0.4, 1.3, 0.3);
        let cfg = BGevConfig::default();
        let (u, y) = (0.1, 2.2);
        let want = -bgev_cdf(u, &q, &cfg).unwrap().ln() - bgev_logpdf(y, &q, &cfg).unwrap()
            + bgev_cdf(y, &q, &cfg).unwrap().ln();
        assert_relative_eq!(one(y, u, 0.4, 1.3, 0.3, PpVariant::Bgev).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn no_exceedances_gives_exposure_only() {
        let q = QuantileParams::new(0.0, 1.0, 0.2);
        let cfg = BGevConfig::default();
        let ys = [0.1, 0.5, 0.9];
        let us = [1.0, 1.0, 1.2];
        let c = PpContext { n_y: 4.0, ..ctx() };
        let got = pp_nll(&ys, &[true; 3], &us, &PpTheta { q: &[0.0; 3], s: &[1.0; 3], xi: 0.2 }, &c, PpVariant::Bgev)
            .unwrap();
        let want: f64 = us.iter().map(|&u| -bgev_cdf(u, &q, &cfg).unwrap().ln() / 4.0).sum();
        assert_relative_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn masked_cells_contribute_zero() {
        let th = PpTheta { q: &[0.0, 0.0], s: &[1.0, 1.0], xi: 0.2 };
        let v = pp_nll(&[f64::NAN, -50.0], &[false, false], &[f64::NAN, 0.0], &th, &ctx(), PpVariant::Gev).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn gev_variant_rejects_points_below_endpoint() {
        // lower endpoint for q=0, s=1, xi=0.2 is mu - sigma/xi ≈ -3.108
        let err = one(1.0, -4.0, 0.0, 1.0, 0.2, PpVariant::Gev).unwrap_err();
        assert!(matches!(err, Error::Domain { cell: 0, .. }));
        let v = one(1.0, -4.0, 0.0, 1.0, 0.2, PpVariant::Bgev).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn variants_agree_above_b2() {
        let cfg = BGevConfig::default();
        let q = QuantileParams::new(0.0, 1.0, 0.3);
        let b2 = blend_derived(&q, &cfg).unwrap().b2;
        for &(u, y) in &[(b2 + 0.01, b2 + 0.5), (1.0, 4.0), (2.0, 1.0)] {
            let a = one(y, u, 0.0, 1.0, 0.3, PpVariant::Gev).unwrap();
            let b = one(y, u, 0.0, 1.0, 0.3, PpVariant::Bgev).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ys = [3.0, -0.65, 0.2, -2.0, 5.0];
        let us = [1.0, -1.3, 0.5, -0.7, -0.5];
        let qs = [0.0, 0.1, -0.2, 0.3, 0.0];
        let ss = [1.0, 0.8, 1.5, 1.1, 0.9];
        let obs = [true; 5];
        let xi = 0.27;
        let c = PpContext { n_y: 3.0, ..ctx() };
        let f = |q: &[f64], s: &[f64], xi: f64| {
            pp_nll(&ys, &obs, &us, &PpTheta { q, s, xi }, &c, PpVariant::Bgev).unwrap()
        };
        let (mut dq, mut ds) = ([0.0; 5], [0.0; 5]);
        let (v, dxi) =
            pp_nll_with_grad(&ys, &obs, &us, &PpTheta { q: &qs, s: &ss, xi }, &c, PpVariant::Bgev, &mut dq, &mut ds)
                .unwrap();
        assert_relative_eq!(v, f(&qs, &ss, xi), epsilon = 1e-12);
        let h = 1e-6;
        for i in 0..5 {
            let (mut qp, mut qm) = (qs, qs);
            qp[i] += h;
            qm[i] -= h;
            let fd = (f(&qp, &ss, xi) - f(&qm, &ss, xi)) / (2.0 * h);
            assert!((fd - dq[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            let (mut sp, mut sm) = (ss, ss);
            sp[i] += h;
            sm[i] -= h;
            let fd = (f(&qs, &sp, xi) - f(&qs, &sm, xi)) / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let fd = (f(&qs, &ss, xi + h) - f(&qs, &ss, xi - h)) / (2.0 * h);
        assert!((fd - dxi).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    /// Maxima of the exceedance process follow the blended GEV.
    #[test]
    fn block_maxima_follow_bgev() {
        let q = QuantileParams::new(0.0, 1.0, 0.2);
        let cfg = BGevConfig::default();
        let u = bgev_quantile(0.02, &q, &cfg).unwrap();
        let gu = bgev_cdf(u, &q, &cfg).unwrap();
        let pois = Poisson::new(-gu.ln()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut maxima = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pois.sample(&mut rng) as usize;
            let mut m = f64::NEG_INFINITY;
            for _ in 0..k {
                let v: f64 = rng.gen();
                // Points above u have survivor log G(y)/log G(u).
                let y = bgev_quantile(gu.powf(v.max(1e-300)), &q, &cfg).unwrap();
                m = m.max(y);
            }
            maxima.push(m);
        }
        maxima.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &m) in maxima.iter().enumerate() {
            if m == f64::NEG_INFINITY {
                continue;
            }
            let f = bgev_cdf(m, &q, &cfg).unwrap();
            ks = ks.max((f - i as f64 / n as f64).abs()).max((f - (i + 1) as f64 / n as f64).abs());
        }
        assert!(ks < 0.01, "ks = {ks}");
    }
}
