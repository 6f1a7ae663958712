//! Model specifications: predictor partitions, layer stacks, links, and the
//! parameter-count formula.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::tape::logistic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Exp,
    Logistic,
}

impl Link {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Link::Identity => x,
            Link::Exp => x.exp().max(f64::MIN_POSITIVE),
            Link::Logistic => logistic(x),
        }
    }

    pub fn inverse(self, y: f64) -> Result<f64> {
        match self {
            Link::Identity => Ok(y),
            Link::Exp if y > 0.0 => Ok(y.ln()),
            Link::Logistic if y > 0.0 && y < 1.0 => Ok((y / (1.0 - y)).ln()),
            _ => Err(Error::invalid(format!("{y} is outside the range of the {self:?} link"))),
        }
    }
}

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        width: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// 'Same'-padded convolution over the spatial grid; filter sides odd.
    Conv {
        width: usize,
        kh: usize,
        kw: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Simple recurrent layer unrolled over `[t − lookback, t + lookahead]`.
    Recurrent {
        width: usize,
        lookback: usize,
        lookahead: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn dense(width: usize) -> Self {
        LayerSpec::Dense { width, activation: Activation::Relu }
    }

    pub fn conv(width: usize, kh: usize, kw: usize) -> Self {
        LayerSpec::Conv { width, kh, kw, activation: Activation::Relu }
    }

    pub fn recurrent(width: usize, lookback: usize, lookahead: usize) -> Self {
        LayerSpec::Recurrent { width, lookback, lookahead, activation: Activation::Relu }
    }

    pub fn width(&self) -> usize {
        match *self {
            LayerSpec::Dense { width, .. } | LayerSpec::Conv { width, .. } | LayerSpec::Recurrent { width, .. } => {
                width
            }
        }
    }

    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. }
            | LayerSpec::Conv { activation, .. }
            | LayerSpec::Recurrent { activation, .. } => activation,
        }
    }

    pub fn param_count(&self, fan_in: usize) -> usize {
        match *self {
            LayerSpec::Dense { width, .. } => fan_in * width + width,
            LayerSpec::Conv { width, kh, kw, .. } => kh * kw * fan_in * width + width,
            LayerSpec::Recurrent { width, .. } => fan_in * width + width * width + width,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. })
    }
}

/// Which predictor columns enter each component.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorPartition {
    pub linear: Vec<usize>,
    pub additive: Vec<usize>,
    pub network: Vec<usize>,
}

impl PredictorPartition {
    pub fn validate(&self, d: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.linear.iter().chain(&self.additive).chain(&self.network) {
            if i >= d {
                return Err(Error::InvalidConfig(format!("predictor index {i} out of range for {d} predictors")));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidConfig(format!("predictor {i} assigned to more than one component")));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.linear.iter().chain(&self.additive).chain(&self.network).copied().collect();
        s.into_iter().collect()
    }
}

/// One distribution parameter's surface `h(η₀ + m_L + m_A + m_N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub name: String,
    pub partition: PredictorPartition,
    #[serde(default = "default_knots")]
    pub knots: usize,
    /// Smoothing weights: empty (no penalty), one shared value, or one per
    /// additive predictor.
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    pub link: Link,
}

fn default_knots() -> usize {
    20
}

impl SurfaceSpec {
    pub fn new(name: &str, partition: PredictorPartition, link: Link) -> Self {
        SurfaceSpec {
            name: name.to_string(),
            partition,
            knots: default_knots(),
            lambda: Vec::new(),
            layers: Vec::new(),
            link,
        }
    }

    pub fn lambda_for(&self, i: usize) -> f64 {
        match self.lambda.len() {
            0 => 0.0,
            1 => self.lambda[0],
            _ => self.lambda[i],
        }
    }

    pub fn has_network(&self) -> bool {
        !self.partition.network.is_empty()
    }

    /// True when every network layer acts on each row independently.
    pub fn pointwise(&self) -> bool {
        self.layers.iter().all(LayerSpec::is_pointwise)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.partition.validate(d)?;
        let a = self.partition.additive.len();
        if a > 0 && self.knots < 2 {
            return Err(Error::InvalidConfig(format!("surface {}: need at least 2 knots", self.name)));
        }
        if !(self.lambda.len() <= 1 || self.lambda.len() == a) {
            return Err(Error::InvalidConfig(format!(
                "surface {}: {} smoothing weights for {a} additive predictors",
                self.name,
                self.lambda.len()
            )));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::InvalidConfig(format!("surface {}: smoothing weights must be >= 0", self.name)));
        }
        for l in &self.layers {
            if l.width() == 0 {
                return Err(Error::InvalidConfig(format!("surface {}: zero-width layer", self.name)));
            }
            if let LayerSpec::Conv { kh, kw, .. } = *l {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "surface {}: convolution filter sides must be odd, got {kh}x{kw}",
                        self.name
                    )));
                }
            }
        }
        if !self.layers.is_empty() && !self.has_network() {
            return Err(Error::InvalidConfig(format!(
                "surface {}: layers given but no network predictors",
                self.name
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let p = &self.partition;
        let mut n = 1 + p.linear.len() + self.knots * p.additive.len();
        if self.has_network() {
            let mut fan_in = p.network.len();
            for l in &self.layers {
                n += l.param_count(fan_in);
                fan_in = l.width();
            }
            n += fan_in;
        }
        n
    }

    /// Largest convolution filter sides, if any.
    pub fn max_filter(&self) -> Option<(usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv { kh, kw, .. } => Some((kh, kw)),
                _ => None,
            })
            .reduce(|a, b| (a.0.max(b.0), a.1.max(b.1)))
    }
}

/// A scalar parameter shared by every cell (e.g. the GEV shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedSpec {
    pub name: String,
    pub link: Link,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of predictor columns available.
    pub d: usize,
    pub surfaces: Vec<SurfaceSpec>,
    #[serde(default)]
    pub shared: Vec<SharedSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for s in &self.surfaces {
            s.validate(self.d)?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate parameter name {}", s.name)));
            }
        }
        for s in &self.shared {
            if !names.insert(s.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate parameter name {}", s.name)));
            }
        }
        Ok(())
    }

    pub fn surface(&self, name: &str) -> Option<&SurfaceSpec> {
        self.surfaces.iter().find(|s| s.name == name)
    }

    /// Same model with every surface's partition rewritten to `form`.
    pub fn with_form(&self, form: Form) -> ModelSpec {
        let mut out = self.clone();
        for s in &mut out.surfaces {
            s.partition = form.partition(&s.partition);
            if !s.has_network() {
                s.layers.clear();
            }
        }
        out
    }
}

/// Trainable scalar count: intercepts, linear coefficients, spline weights,
/// layer weights and biases, output weights, and shared scalars.
pub fn count_params(spec: &ModelSpec) -> usize {
    spec.surfaces.iter().map(SurfaceSpec::param_count).sum::<usize>() + spec.shared.len()
}

/// The seven surface forms obtained by moving predictor groups between
/// components of a base linear/additive/network split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    FullyLinear,
    FullyGam,
    FullyNn,
    LinGam,
    LinNn,
    GamNn,
    LinGamNn,
}

impl Form {
    pub const ALL: [Form; 7] = [
        Form::FullyLinear,
        Form::FullyGam,
        Form::FullyNn,
        Form::LinGam,
        Form::LinNn,
        Form::GamNn,
        Form::LinGamNn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Form::FullyLinear => "fully-linear",
            Form::FullyGam => "fully-GAM",
            Form::FullyNn => "fully-NN",
            Form::LinGam => "lin+GAM",
            Form::LinNn => "lin+NN",
            Form::GamNn => "GAM+NN",
            Form::LinGamNn => "lin+GAM+NN",
        }
    }

    pub fn partition(self, base: &PredictorPartition) -> PredictorPartition {
        let cat = |a: &[usize], b: &[usize]| {
            let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
            v.sort_unstable();
            v
        };
        let all = base.all();
        match self {
            Form::FullyLinear => PredictorPartition { linear: all, ..Default::default() },
            Form::FullyGam => PredictorPartition { additive: all, ..Default::default() },
            Form::FullyNn => PredictorPartition { network: all, ..Default::default() },
            Form::LinGam => PredictorPartition {
                linear: base.linear.clone(),
                additive: cat(&base.additive, &base.network),
                network: Vec::new(),
            },
            Form::LinNn => PredictorPartition {
                linear: cat(&base.linear, &base.additive),
                additive: Vec::new(),
                network: base.network.clone(),
            },
            Form::GamNn => PredictorPartition {
                linear: Vec::new(),
                additive: cat(&base.linear, &base.additive),
                network: base.network.clone(),
            },
            Form::LinGamNn => base.clone(),
        }
    }
}

/// Reference model of the seven-form comparison. Twenty predictors: the
/// location uses 4 linear + 3 additive, the spread 2 + 5, both with 13
/// network inputs through an MLP (10, 6, 3), 20 knots, shared shape.
pub fn comparison_model() -> ModelSpec {
    let net: Vec<usize> = (7..20).collect();
    let mk = |name: &str, nl: usize, link| {
        let mut s = SurfaceSpec::new(
            name,
            PredictorPartition {
                linear: (0..nl).collect(),
                additive: (nl..7).collect(),
                network: net.clone(),
            },
            link,
        );
        s.layers = [10, 6, 3].iter().map(|&w| LayerSpec::dense(w)).collect();
        s
    };
    ModelSpec {
        d: 20,
        surfaces: vec![mk("q", 4, Link::Identity), mk("s", 2, Link::Exp)],
        shared: vec![SharedSpec { name: "xi".into(), link: Link::Logistic }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_form_counts() {
        let base = comparison_model();
        base.validate().unwrap();
        let want = [43, 803, 603, 689, 477, 743, 629];
        for (form, w) in Form::ALL.iter().zip(want) {
            assert_eq!(count_params(&base.with_form(*form)), w, "{}", form.label());
        }
    }

    #[test]
    fn architecture_variant_counts() {
        let mut m = comparison_model();
        for s in &mut m.surfaces {
            s.layers = vec![LayerSpec::dense(6), LayerSpec::dense(3)];
        }
        assert_eq!(count_params(&m), 385);
        for s in &mut m.surfaces {
            s.layers = vec![LayerSpec::conv(6, 3, 3), LayerSpec::conv(3, 3, 3)];
        }
        assert_eq!(count_params(&m), 1921);
        for s in &mut m.surfaces {
            s.layers = [10, 6, 3].iter().map(|&w| LayerSpec::conv(w, 3, 3)).collect();
        }
        assert_eq!(count_params(&m), 3957);
    }

    #[test]
    fn simulation_model_counts() {
        let mk = |p: PredictorPartition, knots, layers: &[usize]| {
            let sf = |name: &str, link| {
                let mut s = SurfaceSpec::new(name, p.clone(), link);
                s.knots = knots;
                if s.has_network() {
                    s.layers = layers.iter().map(|&w| LayerSpec::dense(w)).collect();
                }
                s
            };
            ModelSpec {
                d: 12,
                surfaces: vec![sf("q", Link::Identity), sf("s", Link::Exp)],
                shared: vec![SharedSpec { name: "xi".into(), link: Link::Logistic }],
            }
        };
        let base = PredictorPartition { linear: vec![0, 1], additive: vec![2, 3], network: (4..12).collect() };
        let layers = [12, 8, 4, 2];
        assert_eq!(count_params(&mk(Form::FullyLinear.partition(&base), 10, &layers)), 27);
        assert_eq!(count_params(&mk(Form::FullyGam.partition(&base), 10, &layers)), 243);
        assert_eq!(count_params(&mk(base.clone(), 10, &layers)), 567);
        assert_eq!(count_params(&mk(Form::FullyNn.partition(&base), 10, &layers)), 619);
    }

    #[test]
    fn partition_validation() {
        let p = PredictorPartition { linear: vec![0, 1], additive: vec![1], network: vec![] };
        assert!(p.validate(3).is_err());
        let p = PredictorPartition { linear: vec![5], ..Default::default() };
        assert!(p.validate(3).is_err());
    }

    #[test]
    fn link_ranges() {
        assert!(Link::Exp.apply(-50.0) > 0.0);
        assert!(Link::Exp.apply(-1e4) > 0.0);
        let p = Link::Logistic.apply(40.0);
        assert!(p > 0.0 && p < 1.0);
        assert!((Link::Logistic.inverse(0.2).unwrap() - (0.25f64).ln()).abs() < 1e-15);
    }
}
