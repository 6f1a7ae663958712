//! Fitted preprocessing, parameter layout, and evaluation of parameter
//! surfaces on a tape.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::spec::{Activation, LayerSpec, Link, ModelSpec, SurfaceSpec};
use super::spline::{penalty_matrix, place_knots, SplineTerm};
use super::standardize::ColumnStats;
use crate::autodiff::{ConvGeom, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Predictor values on a regular space-time grid, row `t·H·W + y·W + x`.
/// Independent samples are represented as `n` time steps of a 1×1 grid.
#[derive(Debug, Clone)]
pub struct PredictorCube {
    pub times: usize,
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    pub values: Arc<Tensor>,
}

impl PredictorCube {
    pub fn new(times: usize, height: usize, width: usize, names: Vec<String>, values: Tensor) -> Result<Self> {
        if values.rows != times * height * width || values.cols != names.len() {
            return Err(Error::Shape(format!(
                "predictor table {}x{} does not match {times}x{height}x{width} cells and {} names",
                values.rows,
                values.cols,
                names.len()
            )));
        }
        Ok(PredictorCube {
            times,
            height,
            width,
            names,
            values: Arc::new(values),
        })
    }

    pub fn iid(values: Tensor) -> Self {
        let names = (1..=values.cols).map(|j| format!("x_{j}")).collect();
        PredictorCube {
            times: values.rows,
            height: 1,
            width: 1,
            names,
            values: Arc::new(values),
        }
    }

    pub fn d(&self) -> usize {
        self.values.cols
    }

    pub fn rows(&self) -> usize {
        self.values.rows
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn column(&self, j: usize, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.values.get(r, j)).collect()
    }
}

/// Grid dimensions after zero-padding for filters up to `max_filter`.
pub fn pad_domain(d1: usize, d2: usize, max_filter: Option<(usize, usize)>) -> (usize, usize) {
    match max_filter {
        Some((kh, kw)) => (d1 + kh - 1, d2 + kw - 1),
        None => (d1, d2),
    }
}

/// Statistics and knots frozen from the training rows for one surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePrep {
    pub linear_stats: ColumnStats,
    pub splines: Vec<SplineTerm>,
    pub basis_stats: ColumnStats,
    pub network_stats: ColumnStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// A model specification together with its frozen preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnModel {
    pub spec: ModelSpec,
    pub prep: Vec<SurfacePrep>,
}

#[derive(Debug, Clone)]
enum NetInput {
    Rows(Arc<Tensor>),
    Grid {
        input: Arc<Tensor>,
        times: usize,
        height: usize,
        width: usize,
        out_rows: Arc<Vec<Option<usize>>>,
    },
}

#[derive(Debug, Clone)]
pub struct SurfaceDesign {
    linear: Option<Arc<Tensor>>,
    basis: Option<Arc<Tensor>>,
    net: Option<NetInput>,
}

/// Model inputs for a fixed set of cells.
#[derive(Debug, Clone)]
pub struct Design {
    pub n: usize,
    surfaces: Vec<SurfaceDesign>,
    /// False where a recurrent window leaves the time axis.
    pub valid: Vec<bool>,
}

/// Tape handles for the evaluated parameters.
pub struct Forward {
    /// Post-link `n × 1` values, one per surface.
    pub surfaces: Vec<Var>,
    /// Post-link `1 × 1` values, one per shared scalar.
    pub shared: Vec<Var>,
    /// `Σ ωᵀS_λω/2` when any smoothing weight is positive.
    pub penalty: Option<Var>,
}

/// Evaluated parameter values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theta {
    pub surfaces: BTreeMap<String, Vec<f64>>,
    pub shared: BTreeMap<String, f64>,
}

impl Theta {
    pub fn surface(&self, name: &str) -> &[f64] {
        &self.surfaces[name]
    }
}

fn sub_names(cube: &PredictorCube, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| cube.names[i].clone()).collect()
}

fn select(cube: &PredictorCube, rows: &[usize], cols: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(rows.len(), cols.len());
    for (r, &row) in rows.iter().enumerate() {
        let src = cube.values.row(row);
        for (c, &col) in cols.iter().enumerate() {
            out.data[r * cols.len() + c] = src[col];
        }
    }
    out
}

impl SurfacePrep {
    fn fit(s: &SurfaceSpec, cube: &PredictorCube, train: &[usize]) -> Result<Self> {
        let p = &s.partition;
        let linear_stats = if p.linear.is_empty() {
            ColumnStats::identity(0)
        } else {
            ColumnStats::fit(&select(cube, train, &p.linear), &sub_names(cube, &p.linear))?
        };
        let mut splines = Vec::new();
        for (i, &j) in p.additive.iter().enumerate() {
            let knots = place_knots(&cube.column(j, train), s.knots, &cube.names[j])?;
            splines.push(SplineTerm { predictor: j, knots, lambda: s.lambda_for(i) });
        }
        let basis_stats = if splines.is_empty() {
            ColumnStats::identity(0)
        } else {
            let names: Vec<String> = splines
                .iter()
                .flat_map(|t| (0..t.knots.len()).map(move |k| format!("{}[knot {k}]", cube.names[t.predictor])))
                .collect();
            ColumnStats::fit(&raw_basis(&splines, cube, train), &names)?
        };
        let network_stats = if p.network.is_empty() {
            ColumnStats::identity(0)
        } else {
            ColumnStats::fit(&select(cube, train, &p.network), &sub_names(cube, &p.network))?
        };
        Ok(SurfacePrep { linear_stats, splines, basis_stats, network_stats })
    }
}

fn raw_basis(terms: &[SplineTerm], cube: &PredictorCube, rows: &[usize]) -> Tensor {
    let total: usize = terms.iter().map(|t| t.knots.len()).sum();
    let mut out = Tensor::zeros(rows.len(), total);
    let mut off = 0;
    for t in terms {
        let b = t.basis(&cube.column(t.predictor, rows));
        let k = t.knots.len();
        for r in 0..rows.len() {
            out.data[r * total + off..r * total + off + k].copy_from_slice(b.row(r));
        }
        off += k;
    }
    out
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
    }
}

fn activate(tape: &mut Tape, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

fn apply_link(tape: &mut Tape, x: Var, link: Link) -> Var {
    match link {
        Link::Identity => x,
        Link::Exp => tape.exp(x),
        Link::Logistic => tape.sigmoid(x),
    }
}

/// Row map `(t, s) → (t + offset, s)`, `None` off the time axis.
fn time_shift(times: usize, sites: usize, offset: isize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(times * sites);
    for t in 0..times as isize {
        let src = t + offset;
        for s in 0..sites {
            idx.push(if src >= 0 && src < times as isize { Some(src as usize * sites + s) } else { None });
        }
    }
    idx
}

impl PinnModel {
    /// Fits standardization statistics and knots on the training rows.
    pub fn prepare(spec: ModelSpec, cube: &PredictorCube, train_rows: &[usize]) -> Result<Self> {
        spec.validate()?;
        if spec.d != cube.d() {
            return Err(Error::InvalidConfig(format!(
                "model expects {} predictors, data has {}",
                spec.d,
                cube.d()
            )));
        }
        for s in &spec.surfaces {
            let spatial = s.layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. }));
            if spatial {
                if let Some((kh, kw)) = s.max_filter() {
                    if kh > cube.height.max(1) * 2 + 1 || kw > cube.width.max(1) * 2 + 1 {
                        return Err(Error::InvalidConfig(format!(
                            "surface {}: {kh}x{kw} filter on a {}x{} grid",
                            s.name, cube.height, cube.width
                        )));
                    }
                }
                if cube.height * cube.width == 1 {
                    return Err(Error::InvalidConfig(format!(
                        "surface {}: convolution needs a gridded domain",
                        s.name
                    )));
                }
            }
        }
        let prep = spec
            .surfaces
            .iter()
            .map(|s| SurfacePrep::fit(s, cube, train_rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(PinnModel { spec, prep })
    }

    /// Content hash of the architecture (not of fitted statistics).
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.spec).expect("model spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, rows, cols| out.push(ParamInfo { name, rows, cols });
        for s in &self.spec.surfaces {
            let p = &s.partition;
            push(format!("{}.eta0", s.name), 1, 1);
            if !p.linear.is_empty() {
                push(format!("{}.eta", s.name), p.linear.len(), 1);
            }
            if !p.additive.is_empty() {
                push(format!("{}.omega", s.name), p.additive.len() * s.knots, 1);
            }
            if s.has_network() {
                let mut fan_in = p.network.len();
                for (j, l) in s.layers.iter().enumerate() {
                    let w = l.width();
                    let rows = match *l {
                        LayerSpec::Conv { kh, kw, .. } => kh * kw * fan_in,
                        _ => fan_in,
                    };
                    push(format!("{}.layer{j}.w", s.name), rows, w);
                    push(format!("{}.layer{j}.b", s.name), 1, w);
                    if matches!(l, LayerSpec::Recurrent { .. }) {
                        push(format!("{}.layer{j}.w_rec", s.name), w, w);
                    }
                    fan_in = w;
                }
                push(format!("{}.out", s.name), fan_in, 1);
            }
        }
        for sh in &self.spec.shared {
            push(sh.name.clone(), 1, 1);
        }
        out
    }

    /// Glorot-uniform layer weights, zero biases, splines and linear
    /// coefficients, and intercepts from `intercepts` (natural scale, by
    /// surface or shared name; link-scale 0 otherwise).
    pub fn init_params(&self, seed: u64, intercepts: &BTreeMap<String, f64>) -> Result<Vec<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let links: BTreeMap<String, Link> = self
            .spec
            .surfaces
            .iter()
            .map(|s| (format!("{}.eta0", s.name), s.link))
            .chain(self.spec.shared.iter().map(|s| (s.name.clone(), s.link)))
            .collect();
        let mut fan_ins: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for s in &self.spec.surfaces {
            let mut fan_in = s.partition.network.len();
            for (j, l) in s.layers.iter().enumerate() {
                let k = match *l {
                    LayerSpec::Conv { kh, kw, .. } => kh * kw,
                    _ => 1,
                };
                fan_ins.insert(format!("{}.layer{j}.w", s.name), (k * fan_in, k * l.width()));
                fan_ins.insert(format!("{}.layer{j}.w_rec", s.name), (l.width(), l.width()));
                fan_in = l.width();
            }
            fan_ins.insert(format!("{}.out", s.name), (fan_in, 1));
        }
        let mut out = Vec::new();
        for info in self.layout() {
            let t = if let Some(link) = links.get(&info.name) {
                let key = info.name.trim_end_matches(".eta0");
                let v = match intercepts.get(key) {
                    Some(&v) => link.inverse(v)?,
                    None => 0.0,
                };
                Tensor::scalar(v)
            } else if let Some(&(fi, fo)) = fan_ins.get(&info.name) {
                glorot(&mut rng, info.rows, info.cols, fi, fo)
            } else {
                Tensor::zeros(info.rows, info.cols)
            };
            out.push(t);
        }
        Ok(out)
    }

    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(Error::Shape(format!("model has {} parameter arrays, got {}", layout.len(), params.len())));
        }
        for (info, p) in layout.iter().zip(params) {
            if (info.rows, info.cols) != p.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {}x{}, got {}x{}",
                    info.name, info.rows, info.cols, p.rows, p.cols
                )));
            }
        }
        Ok(())
    }

    /// Standardized inputs for `rows` of the cube.
    pub fn design(&self, cube: &PredictorCube, rows: &[usize]) -> Result<Design> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= cube.rows()) {
            return Err(Error::Shape(format!("cell row {bad} outside the predictor cube")));
        }
        let mut valid = vec![true; rows.len()];
        let mut surfaces = Vec::new();
        for (s, prep) in self.spec.surfaces.iter().zip(&self.prep) {
            let p = &s.partition;
            let linear = (!p.linear.is_empty())
                .then(|| Arc::new(prep.linear_stats.apply(&select(cube, rows, &p.linear))));
            let basis = (!prep.splines.is_empty())
                .then(|| Arc::new(prep.basis_stats.apply(&raw_basis(&prep.splines, cube, rows))));
            let net = if !s.has_network() {
                None
            } else if s.pointwise() {
                Some(NetInput::Rows(Arc::new(prep.network_stats.apply(&select(cube, rows, &p.network)))))
            } else {
                let (net, grid_valid) = self.grid_input(s, prep, cube, rows)?;
                for (v, g) in valid.iter_mut().zip(grid_valid) {
                    *v &= g;
                }
                Some(net)
            };
            surfaces.push(SurfaceDesign { linear, basis, net });
        }
        Ok(Design { n: rows.len(), surfaces, valid })
    }

    fn grid_input(
        &self,
        s: &SurfaceSpec,
        prep: &SurfacePrep,
        cube: &PredictorCube,
        rows: &[usize],
    ) -> Result<(NetInput, Vec<bool>)> {
        let (hp, wp) = pad_domain(cube.height, cube.width, s.max_filter());
        let (oy, ox) = ((hp - cube.height) / 2, (wp - cube.width) / 2);
        let sites = hp * wp;
        let all: Vec<usize> = (0..cube.rows()).collect();
        let std = prep.network_stats.apply(&select(cube, &all, &s.partition.network));
        let c = std.cols;
        let mut input = Tensor::zeros(cube.times * sites, c);
        let to_grid = |r: usize| {
            let t = r / cube.sites();
            let rem = r % cube.sites();
            let (y, x) = (rem / cube.width, rem % cube.width);
            t * sites + (y + oy) * wp + (x + ox)
        };
        for r in 0..cube.rows() {
            let g = to_grid(r);
            input.data[g * c..(g + 1) * c].copy_from_slice(std.row(r));
        }
        // Window validity of every grid row through the recurrent layers.
        let mut ok = vec![true; cube.times * sites];
        for l in &s.layers {
            if let LayerSpec::Recurrent { lookback, lookahead, .. } = *l {
                let prev = ok.clone();
                for t in 0..cube.times {
                    for site in 0..sites {
                        let lo = t as isize - lookback as isize;
                        let hi = t + lookahead;
                        let inside = lo >= 0 && hi < cube.times;
                        ok[t * sites + site] =
                            inside && (lo as usize..=hi).all(|tt| prev[tt * sites + site]);
                    }
                }
            }
        }
        let out_rows: Vec<Option<usize>> = rows.iter().map(|&r| Some(to_grid(r))).collect();
        let valid = rows.iter().map(|&r| ok[to_grid(r)]).collect();
        Ok((
            NetInput::Grid {
                input: Arc::new(input),
                times: cube.times,
                height: hp,
                width: wp,
                out_rows: Arc::new(out_rows),
            },
            valid,
        ))
    }

    /// Subset of a pointwise design's rows (mini-batches).
    pub fn design_rows(&self, design: &Design, idx: &[usize]) -> Result<Design> {
        let mut surfaces = Vec::new();
        for sd in &design.surfaces {
            let net = match &sd.net {
                None => None,
                Some(NetInput::Rows(t)) => Some(NetInput::Rows(Arc::new(t.select_rows(idx)))),
                Some(NetInput::Grid { .. }) => {
                    return Err(Error::InvalidConfig(
                        "mini-batches need pointwise networks; use full-batch training".into(),
                    ))
                }
            };
            surfaces.push(SurfaceDesign {
                linear: sd.linear.as_ref().map(|t| Arc::new(t.select_rows(idx))),
                basis: sd.basis.as_ref().map(|t| Arc::new(t.select_rows(idx))),
                net,
            });
        }
        Ok(Design {
            n: idx.len(),
            surfaces,
            valid: idx.iter().map(|&i| design.valid[i]).collect(),
        })
    }

    /// Builds every surface on `tape`; `params` are the vars for [`Self::layout`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], design: &Design) -> Forward {
        let mut k = 0;
        let mut next = || {
            k += 1;
            params[k - 1]
        };
        let mut surfaces = Vec::new();
        let mut penalty: Option<Var> = None;
        for ((s, prep), sd) in self.spec.surfaces.iter().zip(&self.prep).zip(&design.surfaces) {
            let eta0 = next();
            let mut acc: Option<Var> = None;
            let add = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| {
                *acc = Some(match *acc {
                    Some(a) => tape.add(a, v),
                    None => v,
                });
            };
            if let Some(x) = &sd.linear {
                let eta = next();
                let xv = tape.constant(x.clone());
                let m = tape.matmul(xv, eta);
                add(tape, &mut acc, m);
            }
            if let Some(b) = &sd.basis {
                let omega = next();
                let bv = tape.constant(b.clone());
                let m = tape.matmul(bv, omega);
                add(tape, &mut acc, m);
                if prep.splines.iter().any(|t| t.lambda > 0.0) {
                    let sv = tape.constant(penalty_matrix(&prep.splines));
                    let so = tape.matmul(sv, omega);
                    let q = tape.mul(omega, so);
                    let q = tape.sum(q);
                    let q = tape.scale(q, 0.5);
                    penalty = Some(match penalty {
                        Some(p) => tape.add(p, q),
                        None => q,
                    });
                }
            }
            if let Some(net) = &sd.net {
                let m = self.network(tape, s, net, &mut next);
                add(tape, &mut acc, m);
            }
            let pre = match acc {
                Some(a) => tape.add(a, eta0),
                None => {
                    let z = tape.constant(Tensor::zeros(design.n, 1));
                    tape.add(z, eta0)
                }
            };
            surfaces.push(apply_link(tape, pre, s.link));
        }
        let shared = self
            .spec
            .shared
            .iter()
            .map(|sh| {
                let v = next();
                apply_link(tape, v, sh.link)
            })
            .collect();
        Forward { surfaces, shared, penalty }
    }

    fn network(&self, tape: &mut Tape, s: &SurfaceSpec, net: &NetInput, next: &mut dyn FnMut() -> Var) -> Var {
        let (mut h, grid) = match net {
            NetInput::Rows(x) => (tape.constant(x.clone()), None),
            NetInput::Grid { input, times, height, width, out_rows } => {
                (tape.constant(input.clone()), Some((*times, *height, *width, out_rows.clone())))
            }
        };
        for l in &s.layers {
            let w = next();
            let b = next();
            h = match *l {
                LayerSpec::Dense { activation, .. } => {
                    let z = tape.matmul(h, w);
                    let z = tape.add_row_bias(z, b);
                    activate(tape, z, activation)
                }
                LayerSpec::Conv { kh, kw, activation, .. } => {
                    let (times, height, width, _) = grid.clone().expect("conv layers use grid inputs");
                    let geom = ConvGeom { batch: times, height, width, kh, kw };
                    let z = tape.conv2d(h, w, geom);
                    let z = tape.add_row_bias(z, b);
                    activate(tape, z, activation)
                }
                LayerSpec::Recurrent { lookback, lookahead, activation, .. } => {
                    let w_rec = next();
                    let (times, height, width, _) = grid.clone().expect("recurrent layers use grid inputs");
                    let sites = height * width;
                    let mut state: Option<Var> = None;
                    for o in -(lookback as isize)..=(lookahead as isize) {
                        let xo = if o == 0 { h } else { tape.gather(h, Arc::new(time_shift(times, sites, o))) };
                        let mut z = tape.matmul(xo, w);
                        if let Some(st) = state {
                            let r = tape.matmul(st, w_rec);
                            z = tape.add(z, r);
                        }
                        let z = tape.add_row_bias(z, b);
                        state = Some(activate(tape, z, activation));
                    }
                    state.expect("window has at least one step")
                }
            };
        }
        let w_out = next();
        let out = tape.matmul(h, w_out);
        match grid {
            Some((_, _, _, rows)) => tape.gather(out, rows),
            None => out,
        }
    }

    /// Evaluates every surface and shared scalar at fixed parameters.
    pub fn eval_theta(&self, params: &[Tensor], design: &Design) -> Result<Theta> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let f = self.forward(&mut tape, &vars, design);
        let surfaces = self
            .spec
            .surfaces
            .iter()
            .zip(&f.surfaces)
            .map(|(s, v)| (s.name.clone(), tape.value(*v).data.clone()))
            .collect();
        let shared = self
            .spec
            .shared
            .iter()
            .zip(&f.shared)
            .map(|(s, v)| (s.name.clone(), tape.value(*v).item()))
            .collect();
        Ok(Theta { surfaces, shared })
    }

    fn param_index(&self, name: &str) -> Option<usize> {
        self.layout().iter().position(|p| p.name == name)
    }

    /// Linear coefficients on the original predictor scale.
    pub fn linear_coefficients(&self, params: &[Tensor], surface: &str) -> Result<Vec<(usize, f64)>> {
        let si = self.surface_index(surface)?;
        let s = &self.spec.surfaces[si];
        let Some(pi) = self.param_index(&format!("{surface}.eta")) else {
            return Ok(Vec::new());
        };
        let st = &self.prep[si].linear_stats;
        Ok(s.partition.linear.iter().enumerate().map(|(i, &j)| (j, params[pi].data[i] / st.sd[i])).collect())
    }

    /// Additive contribution of predictor `predictor` to `surface`
    /// evaluated at raw values `xs`, centered so it vanishes at `center`.
    pub fn spline_curve(
        &self,
        params: &[Tensor],
        surface: &str,
        predictor: usize,
        xs: &[f64],
        center: f64,
    ) -> Result<Vec<f64>> {
        let si = self.surface_index(surface)?;
        let prep = &self.prep[si];
        let Some(ti) = prep.splines.iter().position(|t| t.predictor == predictor) else {
            return Err(Error::invalid(format!("predictor {predictor} is not additive in {surface}")));
        };
        let pi = self.param_index(&format!("{surface}.omega")).expect("additive surface has weights");
        let off: usize = prep.splines[..ti].iter().map(|t| t.knots.len()).sum();
        let term = &prep.splines[ti];
        let eval = |x: f64| {
            let b = term.basis(&[x]);
            (0..term.knots.len())
                .map(|j| {
                    let c = off + j;
                    params[pi].data[c] * (b.data[j] - prep.basis_stats.mean[c]) / prep.basis_stats.sd[c]
                })
                .sum::<f64>()
        };
        let c0 = eval(center);
        Ok(xs.iter().map(|&x| eval(x) - c0).collect())
    }

    fn surface_index(&self, name: &str) -> Result<usize> {
        self.spec
            .surfaces
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::invalid(format!("no surface named {name}")))
    }
}
