//! Training losses: the blended-GEV point-process likelihood with smoothing
//! penalty, the tilted (pinball) loss, and the Bernoulli log-loss.
//!
//! The point-process loss is summed over cells; tilted and Bernoulli losses
//! are means over observed cells.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evt::{pp_nll_with_grad, PpContext, PpTheta, PpVariant};
use crate::pinn::{Forward, PinnModel};

/// Clamp applied to Bernoulli probabilities.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// Surfaces: location `q`, spread `s`; shared scalar: shape `ξ`.
    BgevPp {
        #[serde(default = "default_variant")]
        variant: PpVariant,
        #[serde(default)]
        ctx: PpContext,
    },
    /// One surface: the `tau`-quantile.
    Tilted { tau: f64 },
    /// One surface: the occurrence probability.
    Bernoulli,
}

fn default_variant() -> PpVariant {
    PpVariant::Bgev
}

impl LossSpec {
    pub fn bgev_pp(ctx: PpContext) -> Self {
        LossSpec::BgevPp { variant: PpVariant::Bgev, ctx }
    }

    /// Checks the loss against the surfaces a model provides.
    pub fn check(&self, model: &PinnModel) -> Result<()> {
        let (surfaces, shared) = (model.spec.surfaces.len(), model.spec.shared.len());
        let ok = match self {
            LossSpec::BgevPp { ctx, .. } => {
                ctx.validate()?;
                surfaces == 2 && shared == 1
            }
            LossSpec::Tilted { tau } => {
                if !(*tau > 0.0 && *tau < 1.0) {
                    return Err(Error::InvalidConfig(format!("tilted loss level {tau} outside (0, 1)")));
                }
                surfaces == 1 && shared == 0
            }
            LossSpec::Bernoulli => surfaces == 1 && shared == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "{self:?} does not fit a model with {surfaces} surfaces and {shared} shared scalars"
            )))
        }
    }

    pub fn needs_threshold(&self) -> bool {
        matches!(self, LossSpec::BgevPp { .. })
    }
}

/// Response values aligned with a design. `observed` is false for missing
/// or held-out cells; `u` is the frozen exceedance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub y: Vec<f64>,
    pub observed: Vec<bool>,
    pub u: Option<Vec<f64>>,
}

impl Response {
    pub fn new(y: Vec<f64>, observed: Vec<bool>, u: Option<Vec<f64>>) -> Result<Self> {
        let n = y.len();
        if observed.len() != n || u.as_ref().is_some_and(|u| u.len() != n) {
            return Err(Error::Shape("response, mask and threshold lengths differ".into()));
        }
        Ok(Response { y, observed, u })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Response {
        Response {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            observed: idx.iter().map(|&i| self.observed[i]).collect(),
            u: self.u.as_ref().map(|u| idx.iter().map(|&i| u[i]).collect()),
        }
    }

    /// Copy with `observed` additionally restricted to `keep`.
    pub fn masked(&self, keep: &[bool]) -> Response {
        let mut r = self.clone();
        for (o, k) in r.observed.iter_mut().zip(keep) {
            *o &= *k;
        }
        r
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// Point-process negative log-likelihood as a single tape node over the
/// location, spread and shape vars.
#[allow(clippy::too_many_arguments)]
pub fn pp_term(
    tape: &mut Tape,
    q: Var,
    s: Var,
    xi: Var,
    resp: &Response,
    mask: &[bool],
    ctx: &PpContext,
    variant: PpVariant,
) -> Result<Var> {
    let u = resp.u.as_ref().ok_or_else(|| Error::InvalidConfig("point-process loss needs a threshold".into()))?;
    let n = resp.len();
    let observed: Vec<bool> = resp.observed.iter().zip(mask).map(|(a, b)| *a && *b).collect();
    let theta = PpTheta { q: &tape.value(q).data, s: &tape.value(s).data, xi: tape.value(xi).item() };
    let mut dq = vec![0.0; n];
    let mut ds = vec![0.0; n];
    let (value, dxi) = pp_nll_with_grad(&resp.y, &observed, u, &theta, ctx, variant, &mut dq, &mut ds)?;
    Ok(tape.map(
        &[q, s, xi],
        Tensor::scalar(value),
        vec![Tensor::column(dq), Tensor::column(ds), Tensor::scalar(dxi)],
    ))
}

/// `τ(y−q)₊ + (1−τ)(q−y)₊`.
pub fn pinball(y: f64, q: f64, tau: f64) -> f64 {
    let r = y - q;
    if r > 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

/// Mean tilted loss over observed cells; 0 when nothing is observed.
pub fn tilted_loss(y: &[f64], q: &[f64], observed: &[bool], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut m = 0usize;
    for i in 0..y.len() {
        if observed[i] {
            total += pinball(y[i], q[i], tau);
            m += 1;
        }
    }
    if m == 0 {
        0.0
    } else {
        total / m as f64
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean Bernoulli negative log-likelihood over observed cells with
/// probabilities clamped to `[1e−12, 1−1e−12]`.
pub fn bernoulli_loss(y: &[f64], p: &[f64], observed: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut m = 0usize;
    for i in 0..y.len() {
        if observed[i] {
            let pi = clamp_prob(p[i]);
            total -= if y[i] > 0.5 { pi.ln() } else { (1.0 - pi).ln() };
            m += 1;
        }
    }
    if m == 0 {
        0.0
    } else {
        total / m as f64
    }
}

fn tilted_term(tape: &mut Tape, q: Var, resp: &Response, mask: &[bool], tau: f64) -> Var {
    let qv = &tape.value(q).data;
    let obs: Vec<bool> = resp.observed.iter().zip(mask).map(|(a, b)| *a && *b).collect();
    let m = obs.iter().filter(|&&o| o).count().max(1) as f64;
    let value = tilted_loss(&resp.y, qv, &obs, tau);
    // subgradient 0 at a kink
    let d = (0..qv.len())
        .map(|i| {
            if !obs[i] || resp.y[i] == qv[i] {
                0.0
            } else if resp.y[i] > qv[i] {
                -tau / m
            } else {
                (1.0 - tau) / m
            }
        })
        .collect();
    tape.map(&[q], Tensor::scalar(value), vec![Tensor::column(d)])
}

fn bernoulli_term(tape: &mut Tape, p: Var, resp: &Response, mask: &[bool]) -> Var {
    let pv = &tape.value(p).data;
    let obs: Vec<bool> = resp.observed.iter().zip(mask).map(|(a, b)| *a && *b).collect();
    let m = obs.iter().filter(|&&o| o).count().max(1) as f64;
    let value = bernoulli_loss(&resp.y, pv, &obs);
    let d = (0..pv.len())
        .map(|i| {
            let pi = pv[i];
            if !obs[i] || pi != clamp_prob(pi) {
                0.0
            } else if resp.y[i] > 0.5 {
                -1.0 / (pi * m)
            } else {
                1.0 / ((1.0 - pi) * m)
            }
        })
        .collect();
    tape.map(&[p], Tensor::scalar(value), vec![Tensor::column(d)])
}

/// Loss of an evaluated model on `resp`, with cells outside `mask`
/// contributing nothing. The smoothing penalty is added unscaled.
pub fn loss_on_tape(tape: &mut Tape, fwd: &Forward, spec: &LossSpec, resp: &Response, mask: &[bool]) -> Result<Var> {
    let data = match *spec {
        LossSpec::BgevPp { variant, ref ctx } => {
            pp_term(tape, fwd.surfaces[0], fwd.surfaces[1], fwd.shared[0], resp, mask, ctx, variant)?
        }
        LossSpec::Tilted { tau } => tilted_term(tape, fwd.surfaces[0], resp, mask, tau),
        LossSpec::Bernoulli => bernoulli_term(tape, fwd.surfaces[0], resp, mask),
    };
    Ok(match fwd.penalty {
        Some(p) => tape.add(data, p),
        None => data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::evt::{pp_nll, PpVariant};
    use crate::pinn::{LayerSpec, Link, ModelSpec, PredictorCube, PredictorPartition, SharedSpec, SurfaceSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn tilted_examples() {
        assert_eq!(tilted_loss(&[1.0, 2.0], &[1.0, 2.0], &[true, true], 0.3), 0.0);
        assert!((tilted_loss(&[2.0], &[1.0], &[true], 0.8) - 0.8).abs() < 1e-15);
        // residuals 1, −2, 0.5, −0.25 at τ = 0.8
        let v = tilted_loss(&[1.0, -2.0, 0.5, -0.25], &[0.0; 4], &[true; 4], 0.8);
        let hand = (0.8 * 1.0 + 0.2 * 2.0 + 0.8 * 0.5 + 0.2 * 0.25) / 4.0;
        assert!((v - hand).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_examples() {
        let v = bernoulli_loss(&[1.0, 0.0, 1.0], &[0.5; 3], &[true; 3]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bernoulli_loss(&[1.0, 0.0], &[1.0, 0.0], &[true; 2]) < 1e-11);
        let v = bernoulli_loss(&[1.0, 0.0], &[0.9, 0.2], &[true; 2]);
        assert!((v - 0.16425203348601803).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn tilted_minimiser_is_empirical_quantile(
            ys in prop::collection::vec(-10.0f64..10.0, 5..40),
            tau in 0.05f64..0.95,
        ) {
            let mut s = ys.clone();
            s.sort_by(f64::total_cmp);
            // any order statistic with index ceil(nτ) minimises the pinball sum
            let k = ((ys.len() as f64 * tau).ceil() as usize).max(1) - 1;
            let obs = vec![true; ys.len()];
            let best = tilted_loss(&ys, &vec![s[k]; ys.len()], &obs, tau);
            for &c in &s {
                prop_assert!(best <= tilted_loss(&ys, &vec![c; ys.len()], &obs, tau) + 1e-12);
            }
        }

        #[test]
        fn losses_ignore_cell_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let obs = vec![true; n];
            let perm: Vec<usize> = (0..n).rev().collect();
            let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
            prop_assert!((tilted_loss(&y, &q, &obs, 0.7) - tilted_loss(&pick(&y), &pick(&q), &obs, 0.7)).abs() < 1e-12);
            prop_assert!((bernoulli_loss(&b, &p, &obs) - bernoulli_loss(&pick(&b), &pick(&p), &obs)).abs() < 1e-12);
        }
    }

    fn pp_model(d: usize, lambda: f64) -> (PinnModel, PredictorCube) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let x = Tensor::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cube = PredictorCube::iid(x);
        let p = PredictorPartition { linear: vec![0], additive: vec![1], network: vec![2] };
        let mut q = SurfaceSpec::new("q", p.clone(), Link::Identity);
        q.knots = 4;
        q.lambda = vec![lambda];
        q.layers = vec![LayerSpec::dense(3)];
        let mut s = SurfaceSpec::new("s", p, Link::Exp);
        s.knots = 4;
        s.layers = vec![LayerSpec::dense(2)];
        let spec = ModelSpec { d, surfaces: vec![q, s], shared: vec![SharedSpec { name: "xi".into(), link: Link::Logistic }] };
        let rows: Vec<usize> = (0..n).collect();
        (PinnModel::prepare(spec, &cube, &rows).unwrap(), cube)
    }

    fn toy_response(n: usize, seed: u64) -> Response {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
        let observed = (0..n).map(|i| i % 7 != 3).collect();
        Response::new(y, observed, Some(vec![1.5; n])).unwrap()
    }

    fn eval(model: &PinnModel, cube: &PredictorCube, params: &[Tensor], spec: &LossSpec, resp: &Response) -> (f64, Vec<Tensor>) {
        let rows: Vec<usize> = (0..cube.rows()).collect();
        let design = model.design(cube, &rows).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let fwd = model.forward(&mut tape, &vars, &design);
        let l = loss_on_tape(&mut tape, &fwd, spec, resp, &design.valid).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).item(), vars.iter().map(|v| g.wrt(*v)).collect())
    }

    #[test]
    fn zero_penalty_equals_likelihood() {
        let (model, cube) = pp_model(3, 0.0);
        let mut ic = BTreeMap::new();
        ic.insert("q".into(), 1.0);
        ic.insert("s".into(), 1.0);
        ic.insert("xi".into(), 0.2);
        let params = model.init_params(1, &ic).unwrap();
        let resp = toy_response(30, 2);
        let spec = LossSpec::bgev_pp(PpContext::default());
        let (v, _) = eval(&model, &cube, &params, &spec, &resp);
        let th = model.eval_theta(&params, &model.design(&cube, &(0..30).collect::<Vec<_>>()).unwrap()).unwrap();
        let theta = PpTheta { q: th.surface("q"), s: th.surface("s"), xi: th.shared["xi"] };
        let direct = pp_nll(&resp.y, &resp.observed, resp.u.as_ref().unwrap(), &theta, &PpContext::default(), PpVariant::Bgev).unwrap();
        assert_eq!(v, direct);
    }

    #[test]
    fn masked_data_leaves_only_penalty() {
        let (model, cube) = pp_model(3, 2.0);
        let mut params = model.init_params(1, &BTreeMap::new()).unwrap();
        let omega = model.layout().iter().position(|p| p.name == "q.omega").unwrap();
        params[omega] = Tensor::column(vec![0.3, -0.2, 0.1, 0.4]);
        let mut resp = toy_response(30, 2);
        resp.observed = vec![false; 30];
        let (v, _) = eval(&model, &cube, &params, &LossSpec::bgev_pp(PpContext::default()), &resp);
        let want = crate::pinn::penalty_value(&params[omega].data, &model.prep[0].splines);
        assert!((v - want).abs() < 1e-12, "{v} {want}");
    }

    #[test]
    fn four_cell_components() {
        let (model, cube) = pp_model(3, 0.5);
        let mut params = model.init_params(4, &BTreeMap::new()).unwrap();
        let omega = model.layout().iter().position(|p| p.name == "q.omega").unwrap();
        params[omega] = Tensor::column(vec![0.1, 0.2, -0.3, 0.05]);
        let mut resp = toy_response(30, 9);
        for (i, o) in resp.observed.iter_mut().enumerate() {
            *o = i < 4;
        }
        let (v, _) = eval(&model, &cube, &params, &LossSpec::bgev_pp(PpContext::default()), &resp);
        let th = model.eval_theta(&params, &model.design(&cube, &(0..30).collect::<Vec<_>>()).unwrap()).unwrap();
        let theta = PpTheta { q: th.surface("q"), s: th.surface("s"), xi: th.shared["xi"] };
        let nll = pp_nll(&resp.y, &resp.observed, resp.u.as_ref().unwrap(), &theta, &PpContext::default(), PpVariant::Bgev).unwrap();
        let pen = crate::pinn::penalty_value(&params[omega].data, &model.prep[0].splines);
        assert!((v - nll - pen).abs() < 1e-12);
    }

    #[test]
    fn objective_gradients_match_differences() {
        let (model, cube) = pp_model(3, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ic = BTreeMap::new();
        ic.insert("q".into(), 1.0);
        ic.insert("s".into(), 1.0);
        ic.insert("xi".into(), 0.2);
        let mut params = model.init_params(5, &ic).unwrap();
        for p in params.iter_mut() {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let resp = toy_response(30, 4);
        let spec = LossSpec::bgev_pp(PpContext::default());
        let (_, grads) = eval(&model, &cube, &params, &spec, &resp);
        let mut f = |p: &[Tensor]| eval(&model, &cube, p, &spec, &resp).0;
        let report = grad_check(&mut f, &params, &grads, 1e-5, 1e-4);
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn tilted_kink_is_excluded_not_failed() {
        let x = Tensor::column(vec![0.0; 3]);
        let cube = PredictorCube::iid(x);
        let spec = ModelSpec { d: 1, surfaces: vec![SurfaceSpec::new("u", PredictorPartition::default(), Link::Identity)], shared: vec![] };
        let model = PinnModel::prepare(spec, &cube, &[0, 1, 2]).unwrap();
        let resp = Response::new(vec![1.0, 2.0, 3.0], vec![true; 3], None).unwrap();
        let loss = LossSpec::Tilted { tau: 0.5 };
        let params = vec![Tensor::scalar(2.0)];
        let (_, g) = eval(&model, &cube, &params, &loss, &resp);
        let mut f = |p: &[Tensor]| eval(&model, &cube, p, &loss, &resp).0;
        let report = grad_check(&mut f, &params, &g, 1e-5, 1e-8);
        assert_eq!(report.count(crate::autodiff::CheckStatus::Excluded), 1);
        assert!(report.passed());
    }
}
