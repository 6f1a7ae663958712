//! Executes a run configuration. Every artifact is written atomically into
//! one output directory, next to a manifest holding the configuration,
//! seeds and content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::autodiff::{grad_check, GradCheckReport, Tensor};
use crate::error::{Error, Result};
use crate::evt::{bgev_quantile, gev_cdf, gev_quantile, reparam_to_classic, BlendFrame, PpContext, PpVariant, QuantileParams};
use crate::fsio;
use crate::metrics::{aic, default_thresholds, pit_exponential, qq_exponential, smad, smad_default_m, twcrps, ScorePanel};
use crate::objectives::{LossSpec, Response};
use crate::pinn::spline::quantile_sorted;
use crate::pinn::{count_params, LayerSpec, ModelSpec, PinnModel, PredictorCube, Theta};
use crate::resample::{envelope, stationary_bootstrap};
use crate::simgen::{recovery_linear, simulate, Study};
use crate::train::{
    default_intercepts, estimate_threshold, evaluate, fit, fit_rows, loss_and_grad, make_cv_folds, warm_start, Checkpoint,
    Criterion, FitConfig, FitData, FitReport, Fitted,
};

use super::config::{RunConfig, SweepConfig, Task};
use super::dataset::{sidecar_path, GridDataset};

/// Points per spline curve in single-fit outputs.
pub const CURVE_POINTS: usize = 50;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Upper bound on concurrently running sub-fits.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: Value,
    /// Output file name to sha256, manifest excluded.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    task: Task,
    seeds: BTreeMap<&'static str, u64>,
    response_transform: &'static str,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<Value>,
}

struct Outputs {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Outputs {
    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fsio::write_atomic(&self.dir.join(name), bytes)?;
        self.hashes.insert(name.to_string(), fsio::sha256_hex(bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut b = serde_json::to_vec_pretty(v)?;
        b.push(b'\n');
        self.bytes(name, &b)
    }

    fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(self.dir.join(name), e.into_error()))?;
        self.bytes(name, &bytes)
    }

    fn checkpoint(&mut self, stem: &str, c: &Checkpoint) -> Result<()> {
        c.save(&self.dir.join(stem))?;
        for ext in ["json", "bin"] {
            let name = format!("{stem}.{ext}");
            let bytes = fsio::read(&self.dir.join(&name))?;
            self.hashes.insert(name, fsio::sha256_hex(&bytes));
        }
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Response-scale value of a modelling-scale quantile. Negative estimates
/// are reported as zero.
pub fn report_quantile(v: f64, sqrt: bool) -> f64 {
    let v = v.max(0.0);
    if sqrt {
        v * v
    } else {
        v
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

/// Runs `cfg`, writing into `opts.out`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    if opts.workers == 0 {
        return Err(Error::InvalidConfig("worker count must be positive".into()));
    }
    let mut out = Outputs { dir: opts.out.clone(), hashes: BTreeMap::new() };
    let mut inputs = BTreeMap::new();
    let mut truth = None;
    log::info!("task {:?}, output in {}", cfg.task, opts.out.display());
    let report = match cfg.task {
        Task::Simulate => run_simulate(cfg, &mut out, &mut truth)?,
        Task::Score => run_score(cfg, &mut inputs)?,
        task => {
            let data = Prepared::load(cfg, &mut inputs)?;
            match task {
                Task::Occurrence => run_occurrence(cfg, &data, &mut out)?,
                Task::Threshold => run_threshold(cfg, &data, &mut out)?,
                Task::BgevPp => run_bgev_pp(cfg, &data, &mut out)?,
                Task::Bootstrap => run_bootstrap(cfg, &data, &mut out, opts.workers)?,
                Task::Sweep => run_sweep(cfg, &data, &mut out, opts.workers)?,
                Task::Simulate | Task::Score => unreachable!("handled above"),
            }
        }
    };
    out.json("report.json", &report)?;
    write_manifest(cfg, &out, inputs, truth)?;
    Ok(RunSummary { report, outputs: out.hashes })
}

fn seeds(cfg: &RunConfig) -> BTreeMap<&'static str, u64> {
    let mut s = BTreeMap::from([
        ("run", cfg.seed),
        ("training", cfg.training.seed),
        ("threshold_training", cfg.threshold_fit().seed),
        ("folds", cfg.folds.plan.seed),
    ]);
    if let Some(b) = &cfg.bootstrap {
        s.insert("bootstrap", b.plan.seed);
    }
    if let Some(sim) = &cfg.simulate {
        s.insert("scenario", sim.scenario.seed);
        s.insert("coefficients", sim.scenario.coef_seed);
    }
    s
}

fn write_manifest(cfg: &RunConfig, out: &Outputs, inputs: BTreeMap<String, String>, truth: Option<Value>) -> Result<()> {
    let transform = match &cfg.data {
        Some(d) if d.sqrt => "sqrt",
        _ => "identity",
    };
    let m = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        task: cfg.task,
        seeds: seeds(cfg),
        response_transform: transform,
        config: cfg,
        inputs,
        outputs: &out.hashes,
        truth,
    };
    let mut b = serde_json::to_vec_pretty(&m)?;
    b.push(b'\n');
    fsio::write_atomic(&out.dir.join("manifest.json"), &b)
}

/// A loaded dataset with its training/validation split.
pub struct Prepared {
    pub ds: GridDataset,
    pub cube: PredictorCube,
    /// Modelling-scale response; masked cells are unobserved.
    pub resp: Response,
    pub sqrt: bool,
    pub train: Vec<usize>,
    pub valid: Option<Vec<usize>>,
    /// Fold label of every cell, when folds are used.
    pub labels: Option<Vec<usize>>,
    pub holdout: usize,
}

impl Prepared {
    pub fn load(cfg: &RunConfig, inputs: &mut BTreeMap<String, String>) -> Result<Self> {
        let dc = cfg.data.as_ref().ok_or_else(|| Error::InvalidConfig("no [data] section".into()))?;
        for p in [dc.path.clone(), sidecar_path(&dc.path)] {
            inputs.insert(p.display().to_string(), fsio::sha256_hex(&fsio::read(&p)?));
        }
        let ds = GridDataset::load(&dc.path)?;
        let cube = ds.cube()?;
        let resp = ds.response(dc.sqrt)?;
        let observed: Vec<usize> = (0..ds.cells()).filter(|&i| resp.observed[i]).collect();
        let holdout = cfg.folds.holdout;
        let (train, valid, labels) = if cfg.folds.none {
            (observed, None, None)
        } else {
            let plan = make_cv_folds(&ds.site_coords(), ds.times, &cfg.folds.plan)?;
            let (tr, va): (Vec<usize>, Vec<usize>) = observed.iter().partition(|&&i| plan.labels[i] != holdout);
            (tr, Some(va), Some(plan.labels))
        };
        if train.is_empty() {
            return Err(Error::InvalidConfig("no observed training cells".into()));
        }
        Ok(Prepared { ds, cube, resp, sqrt: dc.sqrt, train, valid, labels, holdout })
    }

    fn position(&self, cell: usize) -> [String; 3] {
        let site = self.ds.site_of(cell);
        [self.ds.time_of(cell).to_string(), (site / self.ds.width).to_string(), (site % self.ds.width).to_string()]
    }

    fn all_rows(&self) -> Vec<usize> {
        (0..self.ds.cells()).collect()
    }

    /// Observed cells with a positive response.
    fn positive(&self) -> Vec<bool> {
        self.resp.y.iter().zip(&self.resp.observed).map(|(y, o)| *o && *y > 0.0).collect()
    }
}

/// Fitted point-process law for one shape value.
#[derive(Debug, Clone, Copy)]
pub struct PpLaw {
    variant: PpVariant,
    ctx: PpContext,
    frame: BlendFrame<f64>,
    xi: f64,
}

impl PpLaw {
    pub fn new(variant: PpVariant, ctx: PpContext, xi: f64) -> Self {
        PpLaw { variant, ctx, frame: ctx.frame(xi), xi }
    }

    fn params(&self, q: f64, s: f64) -> QuantileParams {
        QuantileParams { q_alpha: q, s_beta: s, xi: self.xi, alpha: self.ctx.alpha, beta: self.ctx.beta }
    }

    /// `G(z)^{1/n_y}`.
    pub fn cdf(&self, z: f64, q: f64, s: f64) -> f64 {
        let g = match self.variant {
            PpVariant::Bgev => self.frame.parts((z - q) / s).0.exp(),
            PpVariant::Gev => reparam_to_classic(&self.params(q, s)).map_or(f64::NAN, |p| gev_cdf(z, &p)),
        };
        g.powf(1.0 / self.ctx.n_y)
    }

    pub fn quantile(&self, p: f64, q: f64, s: f64) -> Result<f64> {
        let level = p.powf(self.ctx.n_y);
        let qp = self.params(q, s);
        match self.variant {
            PpVariant::Bgev => bgev_quantile(level, &qp, &self.ctx.blend),
            PpVariant::Gev => gev_quantile(level, &reparam_to_classic(&qp)?),
        }
    }
}

fn pp_loss(cfg: &RunConfig) -> LossSpec {
    LossSpec::BgevPp { variant: cfg.pp.variant, ctx: cfg.pp.context() }
}

fn pp_law(cfg: &RunConfig, theta: &Theta) -> PpLaw {
    PpLaw::new(cfg.pp.variant, cfg.pp.context(), theta.shared["xi"])
}

/// Positive observed cells with threshold `u`.
fn pp_response(data: &Prepared, u: &[f64]) -> Result<Response> {
    Response::new(data.resp.y.clone(), data.positive(), Some(u.to_vec()))
}

fn theta_all(f: &Fitted, data: &Prepared) -> Result<Theta> {
    f.model.eval_theta(f.params(), &f.model.design(&data.cube, &data.all_rows())?)
}

fn surface_values(f: &Fitted, data: &Prepared) -> Result<Vec<f64>> {
    Ok(theta_all(f, data)?.surfaces.into_values().next().expect("one surface"))
}

fn loss_on(f: &Fitted, loss: &LossSpec, data: &Prepared, resp: &Response, rows: &[usize]) -> Result<f64> {
    evaluate(&f.model, loss, &FitData::new(&f.model, &data.cube, resp, rows)?, f.params())
}

fn fit_summary(r: &FitReport) -> Value {
    json!({
        "epochs_run": r.epochs_run,
        "best_epoch": r.best_epoch,
        "best_loss": r.best_loss,
        "skipped_steps": r.skipped_steps,
    })
}

fn valid_rows(data: &Prepared) -> Option<&[usize]> {
    data.valid.as_deref().filter(|v| !v.is_empty())
}

/// Selection by validation loss needs validation cells.
fn checked(cfg: &FitConfig, data: &Prepared) -> Result<FitConfig> {
    if cfg.criterion == Criterion::ValidationLoss && valid_rows(data).is_none() {
        return Err(Error::InvalidConfig("validation-loss selection needs a validation fold".into()));
    }
    Ok(*cfg)
}

/// Scores of a point-process fit; sMAD and twCRPS use the fitted law on
/// the positive cells.
fn pp_panel(cfg: &RunConfig, data: &Prepared, f: &Fitted, resp: &Response, theta: &Theta) -> Result<ScorePanel> {
    let loss = pp_loss(cfg);
    let train_loss = loss_on(f, &loss, data, resp, &data.train)?;
    let valid = valid_rows(data);
    let valid_loss = valid.map(|v| loss_on(f, &loss, data, resp, v)).transpose()?;
    let law = pp_law(cfg, theta);
    let (q, s) = (theta.surface("q"), theta.surface("s"));
    let pit = |rows: &[usize]| -> Vec<f64> {
        rows.iter().filter(|&&i| resp.observed[i]).map(|&i| pit_exponential(law.cdf(resp.y[i], q[i], s[i]))).collect()
    };
    let p1 = cfg.metrics.smad_p1;
    let smad_in = smad(&pit(&data.train), p1, None).ok();
    let smad_out = valid.and_then(|v| smad(&pit(v), p1, None).ok());
    let thresholds = cfg.metrics.thresholds.clone().unwrap_or_else(default_thresholds);
    let tw = valid
        .map(|v| {
            let cells: Vec<usize> = v.iter().copied().filter(|&i| resp.observed[i]).collect();
            let y: Vec<f64> = cells.iter().map(|&i| resp.y[i]).collect();
            let probs: Vec<Vec<f64>> = cells.iter().map(|&i| thresholds.iter().map(|&t| law.cdf(t, q[i], s[i])).collect()).collect();
            twcrps(&y, &vec![true; y.len()], &probs, &thresholds)
        })
        .transpose()?;
    let k = count_params(&f.model.spec);
    Ok(ScorePanel {
        parameters: k,
        train_loss,
        valid_loss,
        aic: aic(train_loss, k),
        smad_in,
        smad_out,
        twcrps: tw,
        stls: None,
    })
}

fn coefficient_rows(f: &Fitted, names: &[String]) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for s in &f.model.spec.surfaces {
        for (j, c) in f.model.linear_coefficients(f.params(), &s.name)? {
            rows.push(vec![s.name.clone(), names[j].clone(), num(c)]);
        }
    }
    Ok(rows)
}

/// Evaluation grid for the spline of one predictor: equal-probability
/// quantiles of its training values, centered at their median.
#[derive(Debug, Clone)]
struct CurveGrid {
    surface: String,
    predictor: usize,
    xs: Vec<f64>,
    center: f64,
}

fn curve_grids(model: &PinnModel, cube: &PredictorCube, rows: &[usize], points: usize) -> Vec<CurveGrid> {
    let mut out = Vec::new();
    for s in &model.spec.surfaces {
        for &j in &s.partition.additive {
            let mut col = cube.column(j, rows);
            col.sort_by(f64::total_cmp);
            let xs = (0..points).map(|i| quantile_sorted(&col, i as f64 / (points - 1).max(1) as f64)).collect();
            out.push(CurveGrid { surface: s.name.clone(), predictor: j, xs, center: quantile_sorted(&col, 0.5) });
        }
    }
    out
}

fn curve_values(f: &Fitted, grids: &[CurveGrid]) -> Result<Vec<Vec<f64>>> {
    grids.iter().map(|g| f.model.spline_curve(f.params(), &g.surface, g.predictor, &g.xs, g.center)).collect()
}

fn write_components(out: &mut Outputs, f: &Fitted, data: &Prepared) -> Result<()> {
    out.table("coefficients.csv", &["surface", "predictor", "estimate"], &coefficient_rows(f, &data.ds.names)?)?;
    let grids = curve_grids(&f.model, &data.cube, &data.train, CURVE_POINTS);
    let values = curve_values(f, &grids)?;
    let mut rows = Vec::new();
    for (g, v) in grids.iter().zip(&values) {
        for (x, m) in g.xs.iter().zip(v) {
            rows.push(vec![g.surface.clone(), data.ds.names[g.predictor].clone(), num(*x), num(*m)]);
        }
    }
    out.table("curves.csv", &["surface", "predictor", "x", "value"], &rows)
}

fn run_simulate(cfg: &RunConfig, out: &mut Outputs, truth: &mut Option<Value>) -> Result<Value> {
    let sc = cfg.simulate.as_ref().ok_or_else(|| Error::InvalidConfig("no [simulate] section".into()))?;
    let sim = simulate(&sc.scenario)?;
    let ds = GridDataset::iid(sim.x.clone(), sim.y.clone())?;
    let rel = sc.output.clone();
    let path = if rel.is_relative() { out.dir.join(&rel) } else { rel.clone() };
    let hash = ds.save(&path)?;
    out.hashes.insert(rel.display().to_string(), hash);
    let side = sidecar_path(&path);
    out.hashes.insert(sidecar_path(&rel).display().to_string(), fsio::sha256_hex(&fsio::read(&side)?));
    let study = sc.scenario.study;
    let mut t = json!({
        "study": study,
        "intercepts": study.intercepts(),
        "xi": study.true_xi(),
        "threshold_prob": study.threshold_prob(),
        "coefficients": sim.coefficients,
    });
    if matches!(study, Study::Recovery1 | Study::Recovery2) {
        t["linear"] = json!({
            "predictors": ["x_7", "x_8"],
            "location": recovery_linear(study, 0),
            "log_spread": recovery_linear(study, 1),
        });
    }
    *truth = Some(t);
    Ok(json!({
        "task": "simulate",
        "study": study,
        "n": sc.scenario.n,
        "d": sc.scenario.dim(),
        "rho": sc.scenario.rho(),
        "exceedance_rate": sim.exceedance_rate(),
        "output": rel.display().to_string(),
    }))
}

/// Reads a forecast table: a `y` column (empty when unobserved) followed by
/// one cdf column per threshold.
pub fn read_forecast(path: &Path, thresholds: usize) -> Result<(Vec<f64>, Vec<bool>, Vec<Vec<f64>>)> {
    let file = path.display().to_string();
    let schema = |detail: String| Error::Schema { file: file.clone(), detail };
    let bytes = fsio::read(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers()?.clone();
    if header.get(0) != Some("y") {
        return Err(schema("first column must be `y`".into()));
    }
    if header.len() != thresholds + 1 {
        return Err(schema(format!("{} forecast columns for {thresholds} thresholds", header.len() - 1)));
    }
    let (mut y, mut obs, mut probs) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| -> Result<f64> {
            rec[c].trim().parse::<f64>().map_err(|_| schema(format!("row {}: column `{}` is not a number", line + 1, &header[c])))
        };
        if rec[0].trim().is_empty() {
            y.push(f64::NAN);
            obs.push(false);
        } else {
            y.push(parse(0)?);
            obs.push(true);
        }
        probs.push((1..rec.len()).map(parse).collect::<Result<Vec<f64>>>()?);
    }
    Ok((y, obs, probs))
}

fn run_score(cfg: &RunConfig, inputs: &mut BTreeMap<String, String>) -> Result<Value> {
    let sc = cfg.score.as_ref().ok_or_else(|| Error::InvalidConfig("no [score] section".into()))?;
    inputs.insert(sc.forecast.display().to_string(), fsio::sha256_hex(&fsio::read(&sc.forecast)?));
    let thresholds = cfg.metrics.thresholds.clone().unwrap_or_else(default_thresholds);
    let (y, obs, probs) = read_forecast(&sc.forecast, thresholds.len())?;
    let score = twcrps(&y, &obs, &probs, &thresholds)?;
    Ok(json!({
        "task": "score",
        "cells": y.len(),
        "observed": obs.iter().filter(|o| **o).count(),
        "twcrps": score,
        "thresholds": thresholds,
    }))
}

fn run_occurrence(cfg: &RunConfig, data: &Prepared, out: &mut Outputs) -> Result<Value> {
    let m = cfg.model.as_ref().expect("validated");
    let spec = m.occurrence_spec(&data.ds.names)?;
    let y: Vec<f64> = data.resp.y.iter().zip(&data.resp.observed).map(|(&v, &o)| if !o { f64::NAN } else { f64::from(v > 0.0) }).collect();
    let resp = Response::new(y, data.resp.observed.clone(), None)?;
    let loss = LossSpec::Bernoulli;
    let fcfg = checked(&cfg.threshold_fit(), data)?;
    let f = fit_rows(spec, &data.cube, &resp, &loss, &data.train, valid_rows(data), &fcfg, None)?;
    let train_loss = loss_on(&f, &loss, data, &resp, &data.train)?;
    let valid_loss = valid_rows(data).map(|v| loss_on(&f, &loss, data, &resp, v)).transpose()?;
    let k = count_params(&f.model.spec);
    let p0 = surface_values(&f, data)?;
    out.checkpoint("occurrence", &f.outcome.checkpoint)?;
    let rows: Vec<Vec<String>> = (0..data.ds.cells())
        .map(|i| {
            let mut r = data.position(i).to_vec();
            r.extend([u8::from(data.resp.observed[i]).to_string(), opt(data.resp.observed[i].then_some(resp.y[i])), num(p0[i])]);
            r
        })
        .collect();
    out.table("predictions.csv", &["t_index", "row", "col", "observed", "occurred", "p0"], &rows)?;
    write_components(out, &f, data)?;
    Ok(json!({
        "task": "occurrence",
        "parameters": k,
        "train_loss": train_loss,
        "valid_loss": valid_loss,
        "aic": aic(train_loss, k),
        "fit": fit_summary(&f.outcome.report),
    }))
}

fn run_threshold(cfg: &RunConfig, data: &Prepared, out: &mut Outputs) -> Result<Value> {
    let m = cfg.model.as_ref().expect("validated");
    let p_u = cfg.pp.p_u;
    let th = estimate_threshold(m.threshold_spec(&data.ds.names)?, &data.cube, &data.resp, &data.train, p_u, &cfg.threshold_fit())?;
    let pos = data.positive();
    let rate = |rows: &[usize]| {
        let cells: Vec<usize> = rows.iter().copied().filter(|&i| pos[i]).collect();
        let n = cells.iter().filter(|&&i| data.resp.y[i] > th.u[i]).count();
        (!cells.is_empty()).then(|| n as f64 / cells.len() as f64)
    };
    out.checkpoint("threshold", &th.fitted.outcome.checkpoint)?;
    let rows: Vec<Vec<String>> = (0..data.ds.cells())
        .map(|i| {
            let mut r = data.position(i).to_vec();
            r.extend([u8::from(data.resp.observed[i]).to_string(), num(th.u[i]), num(report_quantile(th.u[i], data.sqrt))]);
            r
        })
        .collect();
    out.table("predictions.csv", &["t_index", "row", "col", "observed", "u", "u_response"], &rows)?;
    write_components(out, &th.fitted, data)?;
    Ok(json!({
        "task": "threshold",
        "p_u": p_u,
        "parameters": count_params(&th.fitted.model.spec),
        "train_exceedance_rate": rate(&data.train),
        "valid_exceedance_rate": valid_rows(data).and_then(rate),
        "fit": fit_summary(&th.fitted.outcome.report),
    }))
}

/// Threshold fit followed by the point-process fit on its exceedances.
struct PpRun {
    u: Vec<f64>,
    threshold: Option<Fitted>,
    fitted: Fitted,
    resp: Response,
    theta: Theta,
    panel: ScorePanel,
}

fn fit_threshold(cfg: &RunConfig, data: &Prepared, p_u: f64) -> Result<(Vec<f64>, Fitted)> {
    let m = cfg.model.as_ref().expect("validated");
    let th = estimate_threshold(m.threshold_spec(&data.ds.names)?, &data.cube, &data.resp, &data.train, p_u, &cfg.threshold_fit())?;
    Ok((th.u, th.fitted))
}

fn fit_pp(cfg: &RunConfig, data: &Prepared, spec: ModelSpec, u: Vec<f64>, threshold: Option<Fitted>) -> Result<PpRun> {
    let resp = pp_response(data, &u)?;
    let fcfg = checked(&cfg.training, data)?;
    let fitted = fit_rows(spec, &data.cube, &resp, &pp_loss(cfg), &data.train, valid_rows(data), &fcfg, None)?;
    let theta = theta_all(&fitted, data)?;
    let panel = pp_panel(cfg, data, &fitted, &resp, &theta)?;
    Ok(PpRun { u, threshold, fitted, resp, theta, panel })
}

fn run_bgev_pp(cfg: &RunConfig, data: &Prepared, out: &mut Outputs) -> Result<Value> {
    let m = cfg.model.as_ref().expect("validated");
    let (u, th) = fit_threshold(cfg, data, cfg.pp.p_u)?;
    out.checkpoint("threshold", &th.outcome.checkpoint)?;
    let r = match fit_pp(cfg, data, m.pp_spec(&data.ds.names)?, u, Some(th)) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, detail, last_good }) => {
            out.checkpoint("last_good", &last_good)?;
            return Err(Error::Diverged { epoch, detail, last_good });
        }
        Err(e) => return Err(e),
    };
    out.checkpoint("model", &r.fitted.outcome.checkpoint)?;
    let law = pp_law(cfg, &r.theta);
    let (q, s) = (r.theta.surface("q"), r.theta.surface("s"));
    let levels = &cfg.metrics.quantiles;
    let mut header: Vec<String> = ["t_index", "row", "col", "observed", "y", "u", "q", "s"].iter().map(|s| s.to_string()).collect();
    header.extend(levels.iter().map(|p| format!("quantile_{p}")));
    let mut rows = Vec::with_capacity(data.ds.cells());
    for i in 0..data.ds.cells() {
        let mut row = data.position(i).to_vec();
        row.extend([u8::from(r.resp.observed[i]).to_string(), opt(r.resp.observed[i].then_some(r.resp.y[i])), num(r.u[i]), num(q[i]), num(s[i])]);
        for &p in levels {
            row.push(num(report_quantile(law.quantile(p, q[i], s[i])?, data.sqrt)));
        }
        rows.push(row);
    }
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    out.table("predictions.csv", &header_ref, &rows)?;
    write_components(out, &r.fitted, data)?;
    write_qq(out, cfg, data, &r, &law)?;
    let th = r.threshold.as_ref().expect("fitted above");
    Ok(json!({
        "task": "bgev_pp",
        "p_u": cfg.pp.p_u,
        "xi": r.theta.shared["xi"],
        "panel": r.panel,
        "threshold": { "parameters": count_params(&th.model.spec), "fit": fit_summary(&th.outcome.report) },
        "fit": fit_summary(&r.fitted.outcome.report),
    }))
}

fn write_qq(out: &mut Outputs, cfg: &RunConfig, data: &Prepared, r: &PpRun, law: &PpLaw) -> Result<()> {
    let (q, s) = (r.theta.surface("q"), r.theta.surface("s"));
    let p1 = cfg.metrics.smad_p1;
    let mut rows = Vec::new();
    let mut sets = vec![("in", data.train.as_slice())];
    if let Some(v) = valid_rows(data) {
        sets.push(("out", v));
    }
    for (name, cells) in sets {
        let z: Vec<f64> = cells.iter().filter(|&&i| r.resp.observed[i]).map(|&i| pit_exponential(law.cdf(r.resp.y[i], q[i], s[i]))).collect();
        let m = smad_default_m(p1, z.len());
        if let Ok(qq) = qq_exponential(&z, p1, m) {
            rows.extend(qq.into_iter().map(|(t, e)| vec![name.to_string(), num(t), num(e)]));
        }
    }
    out.table("qq.csv", &["sample", "theoretical", "empirical"], &rows)
}

/// Continues training from `base` on new rows, keeping its preprocessing.
fn refit(base: &Fitted, cube: &PredictorCube, resp: &Response, loss: &LossSpec, train: &[usize], valid: Option<&[usize]>, cfg: &FitConfig) -> Result<Fitted> {
    let model = base.model.clone();
    let tr = FitData::new(&model, cube, resp, train)?;
    let va = valid.map(|v| FitData::new(&model, cube, resp, v)).transpose()?;
    let init = warm_start(&base.outcome.checkpoint, &model)?;
    let outcome = fit(&model, loss, &tr, va.as_ref(), init, cfg)?;
    Ok(Fitted { model, outcome })
}

/// Summaries of one bootstrap replicate, flattened in output order.
struct Replicate {
    coefficients: Vec<f64>,
    curves: Vec<f64>,
    map: Vec<f64>,
    xi: f64,
}

fn run_bootstrap(cfg: &RunConfig, data: &Prepared, out: &mut Outputs, workers: usize) -> Result<Value> {
    let b = cfg.bootstrap.as_ref().expect("validated");
    let m = cfg.model.as_ref().expect("validated");
    let (times, sites) = (data.ds.times, data.ds.sites());
    let map_time = b.map_time.unwrap_or(times - 1);
    if map_time >= times {
        return Err(Error::InvalidConfig(format!("map time {map_time} with {times} time steps")));
    }
    let (u0, th0) = fit_threshold(cfg, data, cfg.pp.p_u)?;
    let base = fit_pp(cfg, data, m.pp_spec(&data.ds.names)?, u0, None)?;
    out.checkpoint("threshold", &th0.outcome.checkpoint)?;
    out.checkpoint("model", &base.fitted.outcome.checkpoint)?;

    let grids = curve_grids(&base.fitted.model, &data.cube, &data.train, b.curve_points);
    let map_rows: Vec<usize> = (map_time * sites..(map_time + 1) * sites).collect();
    let levels = &cfg.metrics.quantiles;
    let loss = pp_loss(cfg);
    let positive = data.positive();
    let t_resp = Response { u: None, ..data.resp.masked(&positive) };
    let tau = LossSpec::Tilted { tau: cfg.pp.p_u };

    let summarize = |f: &Fitted| -> Result<Replicate> {
        let mut coefficients = Vec::new();
        for s in &f.model.spec.surfaces {
            coefficients.extend(f.model.linear_coefficients(f.params(), &s.name)?.into_iter().map(|c| c.1));
        }
        let curves = curve_values(f, &grids)?.concat();
        let theta = f.model.eval_theta(f.params(), &f.model.design(&data.cube, &map_rows)?)?;
        let law = pp_law(cfg, &theta);
        let (q, s) = (theta.surface("q"), theta.surface("s"));
        let mut map = Vec::with_capacity(levels.len() * sites);
        for &p in levels {
            for i in 0..sites {
                map.push(report_quantile(law.quantile(p, q[i], s[i])?, data.sqrt));
            }
        }
        Ok(Replicate { coefficients, curves, map, xi: theta.shared["xi"] })
    };

    let seqs = stationary_bootstrap(times, &b.plan)?;
    let replicate = |i: usize| -> Result<Replicate> {
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for &t in &seqs[i] {
            for c in t * sites..(t + 1) * sites {
                if !data.resp.observed[c] {
                    continue;
                }
                match &data.labels {
                    Some(l) if l[c] == data.holdout => va.push(c),
                    _ => tr.push(c),
                }
            }
        }
        if tr.is_empty() {
            return Err(Error::InvalidConfig("resample has no training cells".into()));
        }
        let seed = cfg.training.seed.wrapping_add(1 + i as u64);
        let tcfg = FitConfig { epochs: b.epochs, stride: 1, seed, criterion: Criterion::TrainingLoss, ..cfg.threshold_fit() };
        let th = refit(&th0, &data.cube, &t_resp, &tau, &tr, None, &tcfg)?;
        let u = surface_values(&th, data)?;
        let resp = pp_response(data, &u)?;
        let criterion = if va.is_empty() { Criterion::TrainingLoss } else { Criterion::ValidationLoss };
        let pcfg = FitConfig { epochs: b.epochs, stride: 1, seed, criterion, ..cfg.training };
        let f = refit(&base.fitted, &data.cube, &resp, &loss, &tr, (!va.is_empty()).then_some(&va[..]), &pcfg)?;
        log::info!("bootstrap replicate {i} done, loss {:.4}", f.outcome.report.best_loss);
        summarize(&f)
    };
    let results: Vec<Result<Replicate>> = pool(workers)?.install(|| (0..seqs.len()).into_par_iter().map(replicate).collect());
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => done.push(r),
            Err(e) => failures.push(json!({ "replicate": i, "error": e.to_string() })),
        }
    }
    if done.is_empty() {
        return Err(Error::InvalidConfig(format!("all {} bootstrap replicates failed", seqs.len())));
    }
    let base_summary = summarize(&base.fitted)?;
    let probs = &b.envelope;
    let env = |pick: &dyn Fn(&Replicate) -> Vec<f64>| envelope(&done.iter().map(pick).collect::<Vec<_>>(), probs);
    let level_cols: Vec<String> = probs.iter().map(|p| format!("p{p}")).collect();
    let header = |lead: &[&str]| -> Vec<String> { lead.iter().map(|s| s.to_string()).chain(["base".to_string()]).chain(level_cols.clone()).collect() };
    let emit = |out: &mut Outputs, name: &str, lead: &[&str], keys: Vec<Vec<String>>, base: &[f64], e: &[Vec<f64>]| -> Result<()> {
        let h = header(lead);
        let rows: Vec<Vec<String>> = keys
            .into_iter()
            .enumerate()
            .map(|(j, mut k)| {
                k.push(num(base[j]));
                k.extend(e.iter().map(|row| num(row[j])));
                k
            })
            .collect();
        out.table(name, &h.iter().map(String::as_str).collect::<Vec<_>>(), &rows)
    };

    let mut coef_keys = Vec::new();
    for s in &base.fitted.model.spec.surfaces {
        for &j in &s.partition.linear {
            coef_keys.push(vec![s.name.clone(), data.ds.names[j].clone()]);
        }
    }
    emit(out, "coefficients.csv", &["surface", "predictor"], coef_keys, &base_summary.coefficients, &env(&|r| r.coefficients.clone())?)?;
    let mut curve_keys = Vec::new();
    for g in &grids {
        for x in &g.xs {
            curve_keys.push(vec![g.surface.clone(), data.ds.names[g.predictor].clone(), num(*x)]);
        }
    }
    emit(out, "curves.csv", &["surface", "predictor", "x"], curve_keys, &base_summary.curves, &env(&|r| r.curves.clone())?)?;
    let mut map_keys = Vec::new();
    for &p in levels {
        for (i, &c) in map_rows.iter().enumerate() {
            let pos = data.position(c);
            map_keys.push(vec![num(p), pos[1].clone(), pos[2].clone(), num(data.ds.lat[i]), num(data.ds.lon[i])]);
        }
    }
    emit(out, "quantile_map.csv", &["level", "row", "col", "lat", "lon"], map_keys, &base_summary.map, &env(&|r| r.map.clone())?)?;
    let xi_env: Vec<f64> = env(&|r| vec![r.xi])?.into_iter().map(|row| row[0]).collect();
    Ok(json!({
        "task": "bootstrap",
        "replicates": seqs.len(),
        "completed": done.len(),
        "failures": failures,
        "map_time": map_time,
        "envelope": probs,
        "xi": { "base": base_summary.xi, "envelope": xi_env },
        "base_panel": base.panel,
    }))
}

/// Short label for a hidden-layer stack.
pub fn describe_layers(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { width, .. } => format!("dense{width}"),
            LayerSpec::Conv { width, kh, kw, .. } => format!("conv{width}@{kh}x{kw}"),
            LayerSpec::Recurrent { width, lookback, lookahead, .. } => format!("rnn{width}[-{lookback},+{lookahead}]"),
        })
        .collect::<Vec<_>>()
        .join("-")
}

/// One row of a sweep comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SubRun {
    pub label: String,
    pub parameters: usize,
    pub panel: Option<ScorePanel>,
    pub xi: Option<f64>,
    pub error: Option<String>,
}

fn run_sweep(cfg: &RunConfig, data: &Prepared, out: &mut Outputs, workers: usize) -> Result<Value> {
    let sweep = cfg.sweep.as_ref().expect("validated");
    let m = cfg.model.as_ref().expect("validated");
    let base = m.pp_spec(&data.ds.names)?;
    let p_u = cfg.pp.p_u;
    let points: Vec<(String, ModelSpec, f64)> = match sweep {
        SweepConfig::PU { values } => values.iter().map(|&p| (format!("p_u={p}"), base.clone(), p)).collect(),
        SweepConfig::Form { values } => values
            .iter()
            .map(|&f| {
                let mut spec = base.with_form(f);
                for s in &mut spec.surfaces {
                    if s.has_network() && s.layers.is_empty() {
                        s.layers = m.layers.clone();
                    }
                }
                (f.label().to_string(), spec, p_u)
            })
            .collect(),
        SweepConfig::Architecture { values } => values
            .iter()
            .map(|layers| {
                let mut spec = base.clone();
                for s in &mut spec.surfaces {
                    if s.has_network() {
                        s.layers = layers.clone();
                    }
                }
                (describe_layers(layers), spec, p_u)
            })
            .collect(),
    };
    let shared = match sweep {
        SweepConfig::PU { .. } => None,
        _ => Some(fit_threshold(cfg, data, p_u)?.0),
    };
    let sub = |(label, spec, p): &(String, ModelSpec, f64)| -> SubRun {
        let parameters = count_params(spec);
        let res = (|| -> Result<PpRun> {
            let u = match &shared {
                Some(u) => u.clone(),
                None => fit_threshold(cfg, data, *p)?.0,
            };
            fit_pp(cfg, data, spec.clone(), u, None)
        })();
        match &res {
            Ok(_) => log::info!("sweep point {label} done"),
            Err(e) => log::warn!("sweep point {label} failed: {e}"),
        }
        match res {
            Ok(r) => SubRun { label: label.clone(), parameters, xi: Some(r.theta.shared["xi"]), panel: Some(r.panel), error: None },
            Err(e) => SubRun { label: label.clone(), parameters, panel: None, xi: None, error: Some(e.to_string()) },
        }
    };
    let runs: Vec<SubRun> = pool(workers)?.install(|| points.par_iter().map(sub).collect());
    out.table("comparison.csv", &COMPARISON_COLUMNS, &comparison_rows(&runs))?;
    let failures = runs.iter().filter(|r| r.error.is_some()).count();
    Ok(json!({
        "task": "sweep",
        "over": match sweep { SweepConfig::PU { .. } => "p_u", SweepConfig::Form { .. } => "form", SweepConfig::Architecture { .. } => "architecture" },
        "runs": runs,
        "failures": failures,
    }))
}

const COMPARISON_COLUMNS: [&str; 14] = [
    "label",
    "parameters",
    "train_loss",
    "valid_loss",
    "aic",
    "smad_in",
    "smad_out",
    "twcrps",
    "train_loss_diff",
    "valid_loss_diff",
    "aic_diff",
    "twcrps_diff",
    "xi",
    "error",
];

/// Comparison table; `_diff` columns are distances to the lowest value.
pub fn comparison_rows(runs: &[SubRun]) -> Vec<Vec<String>> {
    let min = |f: &dyn Fn(&ScorePanel) -> Option<f64>| runs.iter().filter_map(|r| r.panel.as_ref().and_then(f)).fold(f64::INFINITY, f64::min);
    let lo = [min(&|p| Some(p.train_loss)), min(&|p| p.valid_loss), min(&|p| Some(p.aic)), min(&|p| p.twcrps)];
    runs.iter()
        .map(|r| {
            let p = r.panel.as_ref();
            let vals = [p.map(|p| p.train_loss), p.and_then(|p| p.valid_loss), p.map(|p| p.aic), p.and_then(|p| p.twcrps)];
            let mut row = vec![
                r.label.clone(),
                r.parameters.to_string(),
                opt(vals[0]),
                opt(vals[1]),
                opt(vals[2]),
                opt(p.and_then(|p| p.smad_in)),
                opt(p.and_then(|p| p.smad_out)),
                opt(vals[3]),
            ];
            row.extend(vals.iter().zip(lo).map(|(v, l)| opt(v.map(|v| v - l))));
            row.push(opt(r.xi));
            row.push(r.error.clone().unwrap_or_default());
            row
        })
        .collect()
}

/// Evaluates a saved model on the configured dataset and writes
/// `predictions.csv`: every surface and shared value on the modelling
/// scale, plus response-scale quantiles for point-process models.
pub fn predict(cfg: &RunConfig, model_stem: &Path, out_dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    let dc = cfg.data.as_ref().ok_or_else(|| Error::InvalidConfig("prediction needs a [data] section".into()))?;
    for p in [dc.path.clone(), sidecar_path(&dc.path)] {
        inputs.insert(p.display().to_string(), fsio::sha256_hex(&fsio::read(&p)?));
    }
    let ds = GridDataset::load(&dc.path)?;
    let cube = ds.cube()?;
    let ckpt = Checkpoint::load(model_stem)?;
    for ext in ["json", "bin"] {
        let p = model_stem.with_extension(ext);
        inputs.insert(p.display().to_string(), fsio::sha256_hex(&fsio::read(&p)?));
    }
    let model = &ckpt.model;
    let all: Vec<usize> = (0..ds.cells()).collect();
    let theta = model.eval_theta(&ckpt.params, &model.design(&cube, &all)?)?;
    let is_pp = theta.surfaces.contains_key("q") && theta.surfaces.contains_key("s") && theta.shared.contains_key("xi");
    let mut header: Vec<String> = ["t_index", "row", "col"].iter().map(|s| s.to_string()).collect();
    header.extend(theta.surfaces.keys().cloned());
    header.extend(theta.shared.keys().cloned());
    if is_pp {
        header.extend(cfg.metrics.quantiles.iter().map(|p| format!("quantile_{p}")));
    }
    let law = is_pp.then(|| pp_law(cfg, &theta));
    let mut rows = Vec::with_capacity(ds.cells());
    for i in all {
        let site = ds.site_of(i);
        let mut row = vec![ds.time_of(i).to_string(), (site / ds.width).to_string(), (site % ds.width).to_string()];
        row.extend(theta.surfaces.values().map(|v| num(v[i])));
        row.extend(theta.shared.values().map(|&v| num(v)));
        if let Some(law) = &law {
            let (q, s) = (theta.surface("q")[i], theta.surface("s")[i]);
            for &p in &cfg.metrics.quantiles {
                row.push(num(report_quantile(law.quantile(p, q, s)?, dc.sqrt)));
            }
        }
        rows.push(row);
    }
    let mut out = Outputs { dir: out_dir.to_path_buf(), hashes: BTreeMap::new() };
    out.table("predictions.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    let report = json!({ "task": "predict", "cells": ds.cells(), "fingerprint": ckpt.fingerprint(), "epoch": ckpt.epoch });
    out.json("report.json", &report)?;
    write_manifest(cfg, &out, inputs, None)?;
    Ok(out.hashes)
}

/// Compares reverse-mode gradients of the point-process loss against
/// central differences, on the first `max_cells` positive training cells
/// with a constant threshold at their `p_u` quantile and parameters
/// jittered away from the initial state.
pub fn gradcheck(cfg: &RunConfig, max_cells: usize, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut inputs = BTreeMap::new();
    let data = Prepared::load(&RunConfig { folds: super::config::FoldSection { none: true, ..cfg.folds }, ..cfg.clone() }, &mut inputs)?;
    let m = cfg.model.as_ref().ok_or_else(|| Error::InvalidConfig("gradient check needs a [model] section".into()))?;
    let pos = data.positive();
    let rows: Vec<usize> = data.train.iter().copied().filter(|&i| pos[i]).take(max_cells).collect();
    if rows.len() < 2 {
        return Err(Error::InvalidConfig("gradient check needs at least two positive cells".into()));
    }
    let mut ys: Vec<f64> = rows.iter().map(|&i| data.resp.y[i]).collect();
    ys.sort_by(f64::total_cmp);
    let u = vec![quantile_sorted(&ys, cfg.pp.p_u); data.ds.cells()];
    let resp = pp_response(&data, &u)?;
    let model = PinnModel::prepare(m.pp_spec(&data.ds.names)?, &data.cube, &rows)?;
    let loss = pp_loss(cfg);
    let fd = FitData::new(&model, &data.cube, &resp, &rows)?;
    let init = model.init_params(cfg.seed, &default_intercepts(&model.spec, &loss, &fd.resp))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params: Vec<Tensor> = init
        .iter()
        .map(|t| {
            let data = t.data.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            Tensor::new(t.rows, t.cols, data)
        })
        .collect::<Result<_>>()?;
    let (_, analytic) = loss_and_grad(&model, &loss, &fd, &params, 1.0)?;
    let mut f = |ps: &[Tensor]| evaluate(&model, &loss, &fd, ps).unwrap_or(f64::NAN);
    Ok(grad_check(&mut f, &params, &analytic, h, tol))
}
