//! Harnesses for the simulation studies: recovery of linear coefficients and
//! additive functions, tail calibration under misspecified response laws,
//! and comparison of surface forms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::evt::PpContext;
use crate::metrics::{centered_ise, normal_grid, pp_log_survival, stls};
use crate::objectives::{LossSpec, Response};
use crate::pinn::{Form, LayerSpec, Link, ModelSpec, PredictorCube, PredictorPartition, SharedSpec, SurfaceSpec};
use crate::simgen::{recovery_additive, recovery_linear, CellLaw, SimData, Study};
use crate::train::{fit_rows, Criterion, FitConfig, FitOutcome, FitReport, Fitted};

/// Location/spread/shape model with the given partition, knot count and
/// hidden widths on both surfaces.
pub fn pp_model(d: usize, partition: PredictorPartition, knots: usize, widths: &[usize]) -> ModelSpec {
    let surface = |name: &str, link| {
        let mut s = SurfaceSpec::new(name, partition.clone(), link);
        s.knots = knots;
        if s.has_network() {
            s.layers = widths.iter().map(|&w| LayerSpec::dense(w)).collect();
        }
        s
    };
    ModelSpec {
        d,
        surfaces: vec![surface("q", Link::Identity), surface("s", Link::Exp)],
        shared: vec![SharedSpec { name: "xi".into(), link: Link::Logistic }],
    }
}

/// Recovery-study model: x₇, x₈ linear, x₉, x₁₀ additive with 20 knots,
/// x₁..x₆ through a (8, 6, 4, 2) network.
pub fn recovery_model() -> ModelSpec {
    let p = PredictorPartition { linear: vec![6, 7], additive: vec![8, 9], network: (0..6).collect() };
    pp_model(10, p, 20, &[8, 6, 4, 2])
}

/// Fully-network model on `d` predictors with widths (8, 6, 4, 2).
pub fn fully_nn_model(d: usize) -> ModelSpec {
    let p = PredictorPartition { network: (0..d).collect(), ..Default::default() };
    pp_model(d, p, 20, &[8, 6, 4, 2])
}

/// Form-comparison model on 12 predictors: base split x₁, x₂ linear,
/// x₃, x₄ additive with 10 knots, the rest through a (12, 8, 4, 2) network.
pub fn form_model(form: Form) -> ModelSpec {
    let base = PredictorPartition { linear: vec![0, 1], additive: vec![2, 3], network: (4..12).collect() };
    pp_model(12, form.partition(&base), 10, &[12, 8, 4, 2])
}

/// Fixed-step training budget: `steps` Adam updates on batches of
/// `batch` rows, checking the selection criterion every `checks`-th of the
/// run, with gradient norms capped at their running `clip` percentile.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub checks: usize,
    pub clip: Option<f64>,
}

impl Budget {
    pub fn config(&self, n_train: usize, seed: u64, criterion: Criterion) -> FitConfig {
        let per_epoch = n_train.div_ceil(self.batch).max(1);
        let epochs = self.steps.div_ceil(per_epoch).max(1);
        FitConfig {
            epochs,
            stride: (epochs / self.checks.max(1)).max(1),
            adam: AdamConfig { lr: self.lr, ..Default::default() },
            seed,
            criterion,
            batch_size: (self.batch < n_train).then_some(self.batch),
            clip_percentile: self.clip,
        }
    }
}

/// A study fit; `stopped_at` is set when training diverged and the last
/// saved state was kept.
#[derive(Debug, Clone)]
pub struct StudyFit {
    pub fitted: Fitted,
    pub stopped_at: Option<usize>,
}

/// `fit_rows`, keeping the last saved state when training diverges.
pub fn fit_keep_best(
    spec: ModelSpec,
    cube: &PredictorCube,
    resp: &Response,
    train_rows: &[usize],
    valid_rows: Option<&[usize]>,
    cfg: &FitConfig,
) -> Result<StudyFit> {
    let loss = LossSpec::bgev_pp(PpContext::default());
    match fit_rows(spec, cube, resp, &loss, train_rows, valid_rows, cfg, None) {
        Ok(fitted) => Ok(StudyFit { fitted, stopped_at: None }),
        Err(Error::Diverged { epoch, last_good, .. }) => {
            let report = FitReport {
                epochs_run: epoch,
                trajectory: Vec::new(),
                saves: vec![(last_good.epoch, last_good.loss)],
                best_epoch: last_good.epoch,
                best_loss: last_good.loss,
                skipped_steps: 0,
            };
            let fitted = Fitted { model: last_good.model.clone(), outcome: FitOutcome { checkpoint: *last_good, report } };
            Ok(StudyFit { fitted, stopped_at: Some(epoch) })
        }
        Err(e) => Err(e),
    }
}

/// Point-process response with the known thresholds of a simulated set.
pub fn sim_response(data: &SimData) -> Result<Response> {
    Response::new(data.y.clone(), vec![true; data.y.len()], Some(data.u.clone()))
}

/// Estimates from one recovery fit, indexed `[surface][slot]` with surface
/// 0 the location and 1 the log-spread, slot 0 for x₇/x₉ and 1 for x₈/x₁₀.
#[derive(Debug, Clone)]
pub struct RecoveryEstimate {
    pub linear: [[f64; 2]; 2],
    /// Additive curves on the evaluation grid, centered at zero.
    pub curves: [[Vec<f64>; 2]; 2],
    pub xi: f64,
}

/// Evaluation grid for additive curves: standard normal quantiles.
pub fn recovery_grid() -> Vec<f64> {
    normal_grid(99)
}

pub fn recovery_estimate(fitted: &Fitted, grid: &[f64]) -> Result<RecoveryEstimate> {
    let p = fitted.params();
    let m = &fitted.model;
    let mut linear = [[0.0; 2]; 2];
    let mut curves: [[Vec<f64>; 2]; 2] = Default::default();
    for (w, name) in ["q", "s"].into_iter().enumerate() {
        for (j, c) in m.linear_coefficients(p, name)? {
            linear[w][j - 6] = c;
        }
        for slot in 0..2 {
            curves[w][slot] = m.spline_curve(p, name, 8 + slot, grid, 0.0)?;
        }
    }
    let design = m.design(&PredictorCube::iid(crate::autodiff::Tensor::zeros(1, m.spec.d)), &[0])?;
    let xi = m.eval_theta(p, &design)?.shared["xi"];
    Ok(RecoveryEstimate { linear, curves, xi })
}

/// Mean squared error of each linear coefficient and mean centered
/// integrated squared error of each additive function over replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryErrors {
    pub mse: [[f64; 2]; 2],
    pub mise: [[f64; 2]; 2],
}

impl RecoveryErrors {
    /// All eight entries, coefficients first.
    pub fn slots(&self) -> Vec<f64> {
        self.mse.iter().chain(&self.mise).flatten().copied().collect()
    }
}

pub fn recovery_errors(study: Study, estimates: &[RecoveryEstimate], grid: &[f64]) -> RecoveryErrors {
    let r = estimates.len() as f64;
    let mut out = RecoveryErrors { mse: [[0.0; 2]; 2], mise: [[0.0; 2]; 2] };
    for w in 0..2 {
        let truth = recovery_linear(study, w);
        for slot in 0..2 {
            let m: Vec<f64> = grid.iter().map(|&x| recovery_additive(study, w, slot, x)).collect();
            let m0 = recovery_additive(study, w, slot, 0.0);
            for e in estimates {
                out.mse[w][slot] += (e.linear[w][slot] - truth[slot]).powi(2) / r;
                out.mise[w][slot] += centered_ise(grid, &m, m0, &e.curves[w][slot], 0.0) / r;
            }
        }
    }
    out
}

/// stLS of a fitted point-process model against the simulation truth over
/// `rows`, with `log(1 − F̂)` from the fitted parameters at the true
/// quantiles.
pub fn stls_against_truth(fitted: &Fitted, data: &SimData, rows: &[usize], p_minus: f64, points: usize) -> Result<f64> {
    let cube = PredictorCube::iid(data.x.clone());
    let design = fitted.model.design(&cube, rows)?;
    let theta = fitted.model.eval_theta(fitted.params(), &design)?;
    let (q, s, xi) = (theta.surface("q"), theta.surface("s"), theta.shared["xi"]);
    let ctx = PpContext::default();
    let laws: Vec<&CellLaw> = rows.iter().map(|&r| &data.laws[r]).collect();
    let mut failure = None;
    let v = stls(rows.len(), p_minus, points, |i, p| match laws[i].quantile(p) {
        Ok(z) => pp_log_survival(z, q[i], s[i], xi, &ctx),
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    });
    match failure {
        Some(e) => Err(e),
        None => v,
    }
}

/// Random `train_frac` / remainder split of `0..n`.
pub fn random_split(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_frac * n as f64).round() as usize;
    let mut train = idx[..cut].to_vec();
    let mut valid = idx[cut..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    (train, valid)
}
