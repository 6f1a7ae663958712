//! Adam training with save-on-improvement checkpoints, cross-validation
//! folds, warm starts and threshold estimation.

mod checkpoint;
mod folds;

pub use checkpoint::{warm_start, Checkpoint};
pub use folds::{correlation, haversine_miles, make_cv_folds, FoldConfig, FoldPlan, EARTH_RADIUS_MILES};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::objectives::{loss_on_tape, LossSpec, Response};
use crate::pinn::{Design, Forward, ModelSpec, PinnModel, PredictorCube};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    TrainingLoss,
    ValidationLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    /// Epochs between checkpoint decisions.
    pub stride: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub criterion: Criterion,
    /// Mini-batch size; full batch when absent.
    pub batch_size: Option<usize>,
    /// When set, each step's gradient norm is capped at this percentile
    /// (in `(0, 1]`) of all gradient norms seen so far in the run, and
    /// mini-batches whose loss overflows to +∞ are skipped instead of
    /// stopping the run.
    pub clip_percentile: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 1000,
            stride: 50,
            adam: AdamConfig::default(),
            seed: 0,
            criterion: Criterion::TrainingLoss,
            batch_size: None,
            clip_percentile: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.stride == 0 || self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("epochs, stride and batch size must be positive".into()));
        }
        if self.clip_percentile.is_some_and(|p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidConfig("clip percentile must lie in (0, 1]".into()));
        }
        self.adam.validate()
    }
}

/// Inputs and response for one set of cells.
#[derive(Debug, Clone)]
pub struct FitData {
    pub design: Design,
    pub resp: Response,
}

impl FitData {
    pub fn new(model: &PinnModel, cube: &PredictorCube, resp: &Response, rows: &[usize]) -> Result<Self> {
        if resp.len() != cube.rows() {
            return Err(Error::Shape(format!("{} responses for {} cells", resp.len(), cube.rows())));
        }
        Ok(FitData { design: model.design(cube, rows)?, resp: resp.select(rows) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub epochs_run: usize,
    /// Training loss per epoch (mean over mini-batches, rescaled to the
    /// full training set, when batching).
    pub trajectory: Vec<f64>,
    /// `(epoch, criterion)` at every save.
    pub saves: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Mini-batch steps skipped because their loss overflowed.
    pub skipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub report: FitReport,
}

impl FitOutcome {
    pub fn params(&self) -> &[Tensor] {
        &self.checkpoint.params
    }
}

/// Caps gradient norms at a running percentile of the norms seen so far.
struct Clipper {
    p: Option<f64>,
    /// Sorted.
    history: Vec<f64>,
}

impl Clipper {
    /// Caps the gradient norm; false when the norm itself is not finite.
    fn apply(&mut self, grads: &mut [Tensor]) -> bool {
        let Some(p) = self.p else { return true };
        let norm = grads.iter().flat_map(|g| &g.data).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return false;
        }
        let at = self.history.partition_point(|&h| h < norm);
        self.history.insert(at, norm);
        let cap = crate::pinn::spline::quantile_sorted(&self.history, p);
        if norm > cap {
            let f = cap / norm;
            for g in grads.iter_mut() {
                g.data.iter_mut().for_each(|v| *v *= f);
            }
        }
        true
    }
}

fn forward_loss(tape: &mut Tape, model: &PinnModel, loss: &LossSpec, vars: &[Var], data: &FitData, scale: f64) -> Result<Var> {
    let fwd = model.forward(tape, vars, &data.design);
    let penalty = fwd.penalty;
    let bare = Forward { penalty: None, ..fwd };
    let mut l = loss_on_tape(tape, &bare, loss, &data.resp, &data.design.valid)?;
    if scale != 1.0 {
        l = tape.scale(l, scale);
    }
    Ok(match penalty {
        Some(p) => tape.add(l, p),
        None => l,
    })
}

/// Loss value at fixed parameters.
pub fn evaluate(model: &PinnModel, loss: &LossSpec, data: &FitData, params: &[Tensor]) -> Result<f64> {
    model.check_params(params)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let l = forward_loss(&mut tape, model, loss, &vars, data, 1.0)?;
    Ok(tape.value(l).item())
}

/// Loss value and gradient with respect to every parameter array.
pub fn loss_and_grad(model: &PinnModel, loss: &LossSpec, data: &FitData, params: &[Tensor], scale: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let l = forward_loss(&mut tape, model, loss, &vars, data, scale)?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).item(), vars.iter().map(|v| g.wrt(*v)).collect()))
}

struct Saver {
    best: Option<Checkpoint>,
    saves: Vec<(usize, f64)>,
}

impl Saver {
    fn offer(&mut self, model: &PinnModel, params: &[Tensor], adam: &AdamState, epoch: usize, crit: f64) {
        let better = match &self.best {
            None => true,
            Some(b) => crit < b.loss,
        };
        if better {
            self.saves.push((epoch, crit));
            self.best = Some(Checkpoint {
                model: model.clone(),
                params: params.to_vec(),
                adam: Some(adam.clone()),
                epoch,
                loss: crit,
            });
        }
    }

    fn diverged(&self, epoch: usize, detail: String) -> Error {
        Error::Diverged {
            epoch,
            detail,
            last_good: Box::new(self.best.clone().expect("epoch 0 always saves")),
        }
    }
}

/// Trains `init` with Adam. Every `stride` epochs (starting at epoch 0) the
/// selection criterion is evaluated at the current parameters and the state
/// is kept when it improves on every earlier save; the returned checkpoint
/// is the last saved state.
pub fn fit(
    model: &PinnModel,
    loss: &LossSpec,
    train: &FitData,
    valid: Option<&FitData>,
    init: Vec<Tensor>,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    loss.check(model)?;
    model.check_params(&init)?;
    if cfg.criterion == Criterion::ValidationLoss && valid.is_none() {
        return Err(Error::InvalidConfig("validation-loss selection needs validation cells".into()));
    }
    let n = train.design.n;
    let batch = cfg.batch_size.filter(|&b| b < n);
    let mut params = init;
    let mut adam = AdamState::new(cfg.adam, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut saver = Saver { best: None, saves: Vec::new() };
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut clipper = Clipper { p: cfg.clip_percentile, history: Vec::new() };
    let mut skipped = 0;

    let criterion = |params: &[Tensor], train_loss: Option<f64>| -> Result<f64> {
        match (cfg.criterion, train_loss) {
            (Criterion::TrainingLoss, Some(l)) => Ok(l),
            (Criterion::TrainingLoss, None) => evaluate(model, loss, train, params),
            (Criterion::ValidationLoss, _) => evaluate(model, loss, valid.expect("checked above"), params),
        }
    };

    for epoch in 0..cfg.epochs {
        let fail = |e: Error, saver: &Saver| -> Error {
            if epoch == 0 {
                e
            } else {
                saver.diverged(epoch, e.to_string())
            }
        };
        match batch {
            None => {
                let (l, mut grads) = loss_and_grad(model, loss, train, &params, 1.0).map_err(|e| fail(e, &saver))?;
                if !l.is_finite() {
                    return Err(fail(Error::NonFiniteLoss { epoch, value: l }, &saver));
                }
                if epoch % cfg.stride == 0 {
                    let c = criterion(&params, Some(l)).map_err(|e| fail(e, &saver))?;
                    if c.is_finite() || epoch == 0 {
                        saver.offer(model, &params, &adam, epoch, c);
                    }
                }
                trajectory.push(l);
                if !clipper.apply(&mut grads) {
                    return Err(fail(Error::NonFiniteLoss { epoch, value: f64::INFINITY }, &saver));
                }
                adam.step(&mut params, &grads)?;
            }
            Some(b) => {
                if epoch % cfg.stride == 0 {
                    let c = criterion(&params, None).map_err(|e| fail(e, &saver))?;
                    if epoch == 0 && !c.is_finite() && cfg.criterion == Criterion::TrainingLoss {
                        return Err(Error::NonFiniteLoss { epoch, value: c });
                    }
                    if c.is_finite() || epoch == 0 {
                        saver.offer(model, &params, &adam, epoch, c);
                    }
                }
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let mut used = 0;
                for idx in order.chunks(b) {
                    let design = model.design_rows(&train.design, idx)?;
                    let part = FitData { design, resp: train.resp.select(idx) };
                    let scale = n as f64 / idx.len() as f64;
                    let (l, mut grads) = loss_and_grad(model, loss, &part, &params, scale).map_err(|e| fail(e, &saver))?;
                    if l == f64::INFINITY && cfg.clip_percentile.is_some() {
                        skipped += 1;
                        continue;
                    }
                    if !l.is_finite() {
                        return Err(fail(Error::NonFiniteLoss { epoch, value: l }, &saver));
                    }
                    if !clipper.apply(&mut grads) {
                        skipped += 1;
                        continue;
                    }
                    total += l;
                    used += 1;
                    adam.step(&mut params, &grads)?;
                }
                trajectory.push(if used > 0 { total / used as f64 } else { f64::INFINITY });
            }
        }
    }
    let best = saver.best.expect("epoch 0 always saves");
    let report = FitReport {
        epochs_run: cfg.epochs,
        trajectory,
        saves: saver.saves,
        best_epoch: best.epoch,
        best_loss: best.loss,
        skipped_steps: skipped,
    };
    Ok(FitOutcome { checkpoint: best, report })
}

fn quantile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    crate::pinn::spline::quantile_sorted(values, p)
}

/// Natural-scale starting values for intercepts: the median response and
/// its interquartile range with shape 0.2 for the point-process loss, the
/// empirical `τ`-quantile for the tilted loss, the event rate for the
/// Bernoulli loss.
pub fn default_intercepts(spec: &ModelSpec, loss: &LossSpec, resp: &Response) -> BTreeMap<String, f64> {
    let mut ys: Vec<f64> = resp.y.iter().zip(&resp.observed).filter(|(y, o)| **o && y.is_finite()).map(|(y, _)| *y).collect();
    let mut out = BTreeMap::new();
    if ys.len() < 2 {
        return out;
    }
    match *loss {
        LossSpec::BgevPp { .. } => {
            let med = quantile(&mut ys, 0.5);
            let iqr = quantile(&mut ys, 0.75) - quantile(&mut ys, 0.25);
            out.insert(spec.surfaces[0].name.clone(), med);
            out.insert(spec.surfaces[1].name.clone(), if iqr > 0.0 { iqr } else { 1.0 });
            out.insert(spec.shared[0].name.clone(), 0.2);
        }
        LossSpec::Tilted { tau } => {
            let q = quantile(&mut ys, tau);
            out.insert(spec.surfaces[0].name.clone(), q);
        }
        LossSpec::Bernoulli => {
            let rate = ys.iter().filter(|&&y| y > 0.5).count() as f64 / ys.len() as f64;
            out.insert(spec.surfaces[0].name.clone(), rate.clamp(0.01, 0.99));
        }
    }
    out
}

/// A fitted model with its report.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: PinnModel,
    pub outcome: FitOutcome,
}

impl Fitted {
    pub fn params(&self) -> &[Tensor] {
        self.outcome.params()
    }
}

/// Prepares `spec` on the training rows, initializes (cold, or warm from
/// `warm`), and fits. `resp` is aligned with the cube rows.
#[allow(clippy::too_many_arguments)]
pub fn fit_rows(
    spec: ModelSpec,
    cube: &PredictorCube,
    resp: &Response,
    loss: &LossSpec,
    train_rows: &[usize],
    valid_rows: Option<&[usize]>,
    cfg: &FitConfig,
    warm: Option<&Checkpoint>,
) -> Result<Fitted> {
    let model = PinnModel::prepare(spec, cube, train_rows)?;
    let train = FitData::new(&model, cube, resp, train_rows)?;
    let valid = valid_rows.map(|r| FitData::new(&model, cube, resp, r)).transpose()?;
    let init = match warm {
        Some(c) => warm_start(c, &model)?,
        None => {
            let ic = default_intercepts(&model.spec, loss, &train.resp.masked(&train.design.valid));
            model.init_params(cfg.seed, &ic)?
        }
    };
    let outcome = fit(&model, loss, &train, valid.as_ref(), init, cfg)?;
    Ok(Fitted { model, outcome })
}

/// Threshold surface and the quantile fit behind it.
#[derive(Debug, Clone)]
pub struct ThresholdFit {
    pub fitted: Fitted,
    /// Threshold for every cube row.
    pub u: Vec<f64>,
}

/// Fits `spec` (one surface) with the tilted loss at level `p_u` on the
/// training cells with a positive response, then evaluates it everywhere.
pub fn estimate_threshold(
    spec: ModelSpec,
    cube: &PredictorCube,
    resp: &Response,
    train_rows: &[usize],
    p_u: f64,
    cfg: &FitConfig,
) -> Result<ThresholdFit> {
    let loss = LossSpec::Tilted { tau: p_u };
    let positive: Vec<bool> = resp.y.iter().map(|&y| y > 0.0).collect();
    let r = Response { u: None, ..resp.masked(&positive) };
    let fitted = fit_rows(spec, cube, &r, &loss, train_rows, None, cfg, None)?;
    let all: Vec<usize> = (0..cube.rows()).collect();
    let design = fitted.model.design(cube, &all)?;
    let theta = fitted.model.eval_theta(fitted.params(), &design)?;
    let u = theta.surfaces.into_values().next().expect("one surface");
    Ok(ThresholdFit { fitted, u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evt::PpContext;
    use crate::pinn::{LayerSpec, Link, PredictorPartition, SharedSpec, SurfaceSpec};
    use rand::Rng;

    fn linear_problem(n: usize, seed: u64) -> (PredictorCube, Response) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[2 * i] - x[2 * i + 1] + rng.gen_range(-0.5..0.5)).collect();
        let cube = PredictorCube::iid(Tensor::new(n, 2, x).unwrap());
        (cube, Response::new(y, vec![true; n], None).unwrap())
    }

    fn quantile_spec() -> ModelSpec {
        let p = PredictorPartition { linear: vec![0, 1], ..Default::default() };
        ModelSpec { d: 2, surfaces: vec![SurfaceSpec::new("u", p, Link::Identity)], shared: vec![] }
    }

    #[test]
    fn saved_losses_never_increase() {
        let (cube, resp) = linear_problem(200, 1);
        let rows: Vec<usize> = (0..200).collect();
        let cfg = FitConfig { epochs: 300, stride: 10, adam: AdamConfig { lr: 0.05, ..Default::default() }, ..Default::default() };
        let f = fit_rows(quantile_spec(), &cube, &resp, &LossSpec::Tilted { tau: 0.5 }, &rows, None, &cfg, None).unwrap();
        let saves = &f.outcome.report.saves;
        assert!(saves.len() > 2);
        assert!(saves.windows(2).all(|w| w[1].1 < w[0].1));
        assert_eq!(f.outcome.checkpoint.epoch, saves.last().unwrap().0);
        assert!(saves.iter().all(|s| s.1 >= f.outcome.report.best_loss));
    }

    #[test]
    fn short_runs_keep_the_initial_state() {
        let (cube, resp) = linear_problem(50, 2);
        let rows: Vec<usize> = (0..50).collect();
        let cfg = FitConfig { epochs: 7, stride: 50, ..Default::default() };
        let f = fit_rows(quantile_spec(), &cube, &resp, &LossSpec::Tilted { tau: 0.5 }, &rows, None, &cfg, None).unwrap();
        assert_eq!(f.outcome.report.saves.len(), 1);
        assert_eq!(f.outcome.checkpoint.epoch, 0);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (cube, resp) = linear_problem(120, 3);
        let rows: Vec<usize> = (0..120).collect();
        let mut spec = quantile_spec();
        spec.surfaces[0].partition = PredictorPartition { linear: vec![0], network: vec![1], ..Default::default() };
        spec.surfaces[0].layers = vec![LayerSpec::dense(4)];
        let cfg = FitConfig { epochs: 40, stride: 5, batch_size: Some(32), seed: 9, ..Default::default() };
        let run = || fit_rows(spec.clone(), &cube, &resp, &LossSpec::Tilted { tau: 0.8 }, &rows, None, &cfg, None).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.outcome.report, b.outcome.report);
        assert_eq!(a.outcome.checkpoint, b.outcome.checkpoint);
    }

    #[test]
    fn validation_responses_are_never_read() {
        let (cube, resp) = linear_problem(100, 4);
        let (train, valid): (Vec<usize>, Vec<usize>) = (0..100).partition(|i| i % 5 != 0);
        let mut poisoned = resp.clone();
        for &i in &valid {
            poisoned.y[i] = f64::NAN;
        }
        let cfg = FitConfig { epochs: 50, stride: 5, ..Default::default() };
        let loss = LossSpec::Tilted { tau: 0.5 };
        let a = fit_rows(quantile_spec(), &cube, &resp, &loss, &train, None, &cfg, None).unwrap();
        let b = fit_rows(quantile_spec(), &cube, &poisoned, &loss, &train, None, &cfg, None).unwrap();
        assert_eq!(a.outcome.report.trajectory, b.outcome.report.trajectory);
    }

    #[test]
    fn validation_selection_uses_held_out_loss() {
        let (cube, resp) = linear_problem(100, 5);
        let (train, valid): (Vec<usize>, Vec<usize>) = (0..100).partition(|i| i % 5 != 0);
        let cfg = FitConfig { epochs: 60, stride: 1, criterion: Criterion::ValidationLoss, adam: AdamConfig { lr: 0.05, ..Default::default() }, ..Default::default() };
        let loss = LossSpec::Tilted { tau: 0.5 };
        let f = fit_rows(quantile_spec(), &cube, &resp, &loss, &train, Some(&valid), &cfg, None).unwrap();
        let vd = FitData::new(&f.model, &cube, &resp, &valid).unwrap();
        let v = evaluate(&f.model, &loss, &vd, f.params()).unwrap();
        assert_eq!(v, f.outcome.report.best_loss);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (cube, resp) = linear_problem(60, 6);
        let rows: Vec<usize> = (0..60).collect();
        let mut spec = quantile_spec();
        spec.surfaces[0].partition = PredictorPartition { additive: vec![0], network: vec![1], ..Default::default() };
        spec.surfaces[0].knots = 5;
        spec.surfaces[0].layers = vec![LayerSpec::dense(3)];
        let cfg = FitConfig { epochs: 20, stride: 1, ..Default::default() };
        let f = fit_rows(spec, &cube, &resp, &LossSpec::Tilted { tau: 0.5 }, &rows, None, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        f.outcome.checkpoint.save(&stem).unwrap();
        let back = Checkpoint::load(&stem).unwrap();
        assert_eq!(back, f.outcome.checkpoint);
        let d = back.model.design(&cube, &rows).unwrap();
        let a = f.model.eval_theta(f.params(), &d).unwrap();
        let b = back.model.eval_theta(&back.params, &d).unwrap();
        assert_eq!(a, b);
        // corrupt the payload
        let bin = stem.with_extension("bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&stem), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn warm_start_checks_architecture() {
        let (cube, resp) = linear_problem(60, 7);
        let rows: Vec<usize> = (0..60).collect();
        let cfg = FitConfig { epochs: 30, stride: 1, ..Default::default() };
        let loss = LossSpec::Tilted { tau: 0.5 };
        let f = fit_rows(quantile_spec(), &cube, &resp, &loss, &rows, None, &cfg, None).unwrap();
        let zero = FitConfig { epochs: 1, stride: 1, adam: AdamConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
        let g = fit_rows(quantile_spec(), &cube, &resp, &loss, &rows, None, &zero, Some(&f.outcome.checkpoint)).unwrap();
        let d = f.model.design(&cube, &rows).unwrap();
        assert_eq!(f.model.eval_theta(f.params(), &d).unwrap(), g.model.eval_theta(g.params(), &d).unwrap());
        let mut other = quantile_spec();
        other.surfaces[0].partition = PredictorPartition { linear: vec![0], network: vec![1], ..Default::default() };
        other.surfaces[0].layers = vec![LayerSpec::dense(2)];
        let r = fit_rows(other, &cube, &resp, &loss, &rows, None, &cfg, Some(&f.outcome.checkpoint));
        assert!(matches!(r, Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn threshold_exceedance_rate() {
        let (cube, mut resp) = linear_problem(2000, 8);
        for y in resp.y.iter_mut() {
            *y = y.abs() + 0.01;
        }
        let rows: Vec<usize> = (0..2000).collect();
        let cfg = FitConfig { epochs: 600, stride: 25, adam: AdamConfig { lr: 0.02, ..Default::default() }, ..Default::default() };
        let t = estimate_threshold(quantile_spec(), &cube, &resp, &rows, 0.8, &cfg).unwrap();
        let rate = resp.y.iter().zip(&t.u).filter(|(y, u)| y > u).count() as f64 / 2000.0;
        assert!((rate - 0.2).abs() < 0.02, "{rate}");
    }

    #[test]
    fn constant_response_threshold() {
        let (cube, mut resp) = linear_problem(100, 9);
        resp.y = vec![3.0; 100];
        let rows: Vec<usize> = (0..100).collect();
        let cfg = FitConfig { epochs: 100, stride: 10, ..Default::default() };
        let t = estimate_threshold(quantile_spec(), &cube, &resp, &rows, 0.8, &cfg).unwrap();
        assert!(t.u.iter().all(|u| (u - 3.0).abs() < 1e-9));
        assert_eq!(resp.y.iter().zip(&t.u).filter(|(y, u)| y > u).count(), 0);
    }

    fn pp_toy(n: usize) -> (PinnModel, FitData, Vec<Tensor>) {
        let cube = PredictorCube::iid(Tensor::column((0..n).map(|i| i as f64).collect()));
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 + i as f64 * 0.1 }).collect();
        let resp = Response::new(y, vec![true; n], Some(vec![0.5; n])).unwrap();
        let spec = ModelSpec {
            d: 1,
            surfaces: vec![
                SurfaceSpec::new("q", PredictorPartition::default(), Link::Identity),
                SurfaceSpec::new("s", PredictorPartition::default(), Link::Exp),
            ],
            shared: vec![SharedSpec { name: "xi".into(), link: Link::Logistic }],
        };
        let rows: Vec<usize> = (0..n).collect();
        let model = PinnModel::prepare(spec, &cube, &rows).unwrap();
        let data = FitData::new(&model, &cube, &resp, &rows).unwrap();
        let init = vec![Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(crate::autodiff::logit(0.2))];
        (model, data, init)
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let (model, data, init) = pp_toy(40);
        let loss = LossSpec::bgev_pp(PpContext::default());
        let cfg = FitConfig { epochs: 20, stride: 1, adam: AdamConfig { lr: 800.0, ..Default::default() }, ..Default::default() };
        match fit(&model, &loss, &data, None, init, &cfg) {
            Err(Error::Diverged { epoch, last_good, .. }) => {
                assert!(epoch > 0);
                assert!(last_good.epoch < epoch);
                assert!(evaluate(&model, &loss, &data, &last_good.params).unwrap().is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gev_variant_fails_where_blend_continues() {
        let (model, mut data, init) = pp_toy(40);
        let cfg = FitConfig { epochs: 100, stride: 10, adam: AdamConfig { lr: 0.05, ..Default::default() }, ..Default::default() };
        let gev = LossSpec::BgevPp { variant: crate::evt::PpVariant::Gev, ctx: PpContext::default() };
        let first = fit(&model, &gev, &data, None, init, &cfg).unwrap();
        let th = first.checkpoint.params.clone();
        let (mu, sigma, xi) = {
            let (q, s, xi) = (th[0].item(), th[1].item().exp(), crate::autodiff::logistic(th[2].item()));
            let p = crate::evt::reparam_to_classic(&crate::evt::QuantileParams::new(q, s, xi)).unwrap();
            (p.mu, p.sigma, xi)
        };
        // move one threshold below the current lower endpoint
        data.resp.u.as_mut().unwrap()[3] = mu - sigma / xi - 1.0;
        assert!(matches!(evaluate(&model, &gev, &data, &th), Err(Error::Domain { .. })));
        let bgev = LossSpec::bgev_pp(PpContext::default());
        let f = fit(&model, &bgev, &data, None, th, &cfg).unwrap();
        assert!(f.report.trajectory.iter().all(|l| l.is_finite()));
    }
}
