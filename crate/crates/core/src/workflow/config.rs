//! Declarative run configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evt::{PpContext, PpVariant};
use crate::fsio;
use crate::pinn::{Form, LayerSpec, Link, ModelSpec, PredictorPartition, SharedSpec, SurfaceSpec};
use crate::resample::BootstrapPlan;
use crate::simgen::ScenarioSpec;
use crate::train::{FitConfig, FoldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Occurrence,
    Threshold,
    BgevPp,
    Simulate,
    Score,
    Bootstrap,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    /// Model the square root of the response; predictions are squared back.
    #[serde(default = "yes")]
    pub sqrt: bool,
}

fn yes() -> bool {
    true
}

/// Predictor names per component; knots and layers default to the
/// model-wide values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    pub linear: Vec<String>,
    pub additive: Vec<String>,
    pub network: Vec<String>,
    pub lambda: Vec<f64>,
    pub knots: Option<usize>,
    pub layers: Option<Vec<LayerSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_knots")]
    pub knots: usize,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    pub location: SurfaceConfig,
    pub spread: SurfaceConfig,
    /// Quantile surface for the threshold; the location partition when absent.
    #[serde(default)]
    pub threshold: Option<SurfaceConfig>,
    /// Probability-of-occurrence surface; the location partition when absent.
    #[serde(default)]
    pub occurrence: Option<SurfaceConfig>,
}

fn default_knots() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpConfig {
    pub n_y: f64,
    /// Exceedance probability level of the threshold surface.
    pub p_u: f64,
    pub variant: PpVariant,
}

impl Default for PpConfig {
    fn default() -> Self {
        PpConfig { n_y: 1.0, p_u: 0.8, variant: PpVariant::Bgev }
    }
}

impl PpConfig {
    pub fn context(&self) -> PpContext {
        PpContext { n_y: self.n_y, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSection {
    #[serde(flatten)]
    pub plan: FoldConfig,
    /// Fold held out for validation.
    pub holdout: usize,
    /// Fit on all observed cells and skip validation.
    pub none: bool,
}

impl Default for FoldSection {
    fn default() -> Self {
        FoldSection { plan: FoldConfig::default(), holdout: 0, none: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    #[serde(flatten)]
    pub plan: BootstrapPlan,
    /// Epochs for each warm-started replicate fit.
    pub epochs: usize,
    #[serde(default = "default_envelope")]
    pub envelope: Vec<f64>,
    /// Points per spline curve.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
    /// Time step of the quantile maps; the last one when absent.
    #[serde(default)]
    pub map_time: Option<usize>,
}

fn default_envelope() -> Vec<f64> {
    vec![0.025, 0.5, 0.975]
}

fn default_curve_points() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// twCRPS thresholds on the modelling scale; by default 24 values
    /// from √30 to √100000.
    pub thresholds: Option<Vec<f64>>,
    /// Lower probability of the sMAD Q-Q range.
    pub smad_p1: f64,
    /// Response-scale quantile levels written to prediction tables.
    pub quantiles: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { thresholds: None, smad_p1: 0.95, quantiles: vec![0.5, 0.9, 0.99] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "over", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepConfig {
    /// Threshold exceedance probabilities.
    PU { values: Vec<f64> },
    /// Surface forms derived from the configured partition.
    Form { values: Vec<Form> },
    /// Hidden-layer stacks, one per grid point.
    Architecture { values: Vec<Vec<LayerSpec>> },
}

impl SweepConfig {
    pub fn len(&self) -> usize {
        match self {
            SweepConfig::PU { values } => values.len(),
            SweepConfig::Form { values } => values.len(),
            SweepConfig::Architecture { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: ScenarioSpec,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Table of forecast cdf values, one column per twCRPS threshold.
    pub forecast: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub pp: PpConfig,
    #[serde(default)]
    pub training: FitConfig,
    /// Training settings for the threshold and occurrence fits; `training`
    /// when absent.
    #[serde(default)]
    pub threshold_training: Option<FitConfig>,
    #[serde(default)]
    pub folds: FoldSection,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSection>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub score: Option<ScoreConfig>,
}

fn missing(section: &str, task: Task) -> Error {
    Error::InvalidConfig(format!("task {task:?} needs a [{section}] section"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    /// Reads `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::parse(&fsio::read_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            fix(&mut d.path);
        }
        if let Some(s) = cfg.score.as_mut() {
            fix(&mut s.forecast);
        }
        Ok(cfg)
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.training.seed = seed;
        if let Some(t) = self.threshold_training.as_mut() {
            t.seed = seed;
        }
        self.folds.plan.seed = seed;
        if let Some(b) = self.bootstrap.as_mut() {
            b.plan.seed = seed;
        }
        if let Some(s) = self.simulate.as_mut() {
            s.scenario.seed = seed;
        }
        self
    }

    pub fn threshold_fit(&self) -> FitConfig {
        self.threshold_training.unwrap_or(self.training)
    }

    /// Section checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let t = self.task;
        let needs_data = !matches!(t, Task::Simulate | Task::Score);
        if needs_data && self.data.is_none() {
            return Err(missing("data", t));
        }
        if needs_data && self.model.is_none() {
            return Err(missing("model", t));
        }
        if !(self.pp.p_u > 0.0 && self.pp.p_u < 1.0) {
            return Err(Error::InvalidConfig(format!("p_u = {} is not in (0, 1)", self.pp.p_u)));
        }
        self.pp.context().validate()?;
        self.training.validate()?;
        self.threshold_fit().validate()?;
        if self.folds.holdout >= self.folds.plan.k {
            return Err(Error::InvalidConfig(format!("holdout fold {} with k = {}", self.folds.holdout, self.folds.plan.k)));
        }
        match t {
            Task::Simulate => self.simulate.as_ref().ok_or_else(|| missing("simulate", t))?.scenario.validate()?,
            Task::Score => {
                self.score.as_ref().ok_or_else(|| missing("score", t))?;
            }
            Task::Bootstrap => {
                let b = self.bootstrap.as_ref().ok_or_else(|| missing("bootstrap", t))?;
                b.plan.validate()?;
                if b.epochs == 0 || b.envelope.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::InvalidConfig("bootstrap epochs must be positive and envelope levels in [0, 1]".into()));
                }
            }
            Task::Sweep => {
                let s = self.sweep.as_ref().ok_or_else(|| missing("sweep", t))?;
                if s.is_empty() {
                    return Err(Error::InvalidConfig("sweep grid is empty".into()));
                }
            }
            _ => {}
        }
        if let Some(th) = &self.metrics.thresholds {
            if th.windows(2).any(|w| w[1] <= w[0]) || th.is_empty() {
                return Err(Error::InvalidConfig("metric thresholds must be increasing".into()));
            }
        }
        Ok(())
    }
}

fn resolve(names: &[String], part: &str, surface: &str, index: &BTreeMap<&str, usize>) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            index
                .get(n.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("{surface}.{part} names unknown predictor `{n}`")))
        })
        .collect()
}

impl ModelConfig {
    fn surface(&self, name: &str, sc: &SurfaceConfig, link: Link, predictors: &[String]) -> Result<SurfaceSpec> {
        let index: BTreeMap<&str, usize> = predictors.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let partition = PredictorPartition {
            linear: resolve(&sc.linear, "linear", name, &index)?,
            additive: resolve(&sc.additive, "additive", name, &index)?,
            network: resolve(&sc.network, "network", name, &index)?,
        };
        let mut s = SurfaceSpec::new(name, partition, link);
        s.knots = sc.knots.unwrap_or(self.knots);
        s.lambda = sc.lambda.clone();
        if s.has_network() {
            s.layers = sc.layers.clone().unwrap_or_else(|| self.layers.clone());
        }
        Ok(s)
    }

    /// Location/spread/shape model over `predictors`.
    pub fn pp_spec(&self, predictors: &[String]) -> Result<ModelSpec> {
        let spec = ModelSpec {
            d: predictors.len(),
            surfaces: vec![
                self.surface("q", &self.location, Link::Identity, predictors)?,
                self.surface("s", &self.spread, Link::Exp, predictors)?,
            ],
            shared: vec![SharedSpec { name: "xi".into(), link: Link::Logistic }],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Single-surface quantile model for the threshold.
    pub fn threshold_spec(&self, predictors: &[String]) -> Result<ModelSpec> {
        let sc = self.threshold.as_ref().unwrap_or(&self.location);
        self.single("u", sc, Link::Exp, predictors)
    }

    pub fn occurrence_spec(&self, predictors: &[String]) -> Result<ModelSpec> {
        let sc = self.occurrence.as_ref().unwrap_or(&self.location);
        self.single("p0", sc, Link::Logistic, predictors)
    }

    fn single(&self, name: &str, sc: &SurfaceConfig, link: Link, predictors: &[String]) -> Result<ModelSpec> {
        let spec = ModelSpec { d: predictors.len(), surfaces: vec![self.surface(name, sc, link, predictors)?], shared: Vec::new() };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
task = "bgev_pp"
seed = 7

[data]
path = "grid.csv"

[model]
knots = 5
layers = [{ kind = "dense", width = 4 }, { kind = "dense", width = 2 }]

[model.location]
linear = ["temp"]
network = ["a", "b"]

[model.spread]
additive = ["temp"]

[training]
epochs = 20
stride = 5
adam = { lr = 0.01 }
"#;

    fn names() -> Vec<String> {
        ["temp", "a", "b"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_and_builds_specs() {
        let cfg = RunConfig::parse(BASIC).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.task, Task::BgevPp);
        assert_eq!(cfg.training.adam.lr, 0.01);
        assert_eq!(cfg.training.adam.beta1, 0.9);
        let m = cfg.model.as_ref().unwrap();
        let spec = m.pp_spec(&names()).unwrap();
        assert_eq!(spec.surfaces[0].partition.network, vec![1, 2]);
        assert_eq!(spec.surfaces[0].layers.len(), 2);
        assert!(spec.surfaces[1].layers.is_empty());
        assert_eq!(spec.surfaces[1].knots, 5);
        let th = m.threshold_spec(&names()).unwrap();
        assert_eq!(th.surfaces[0].link, Link::Exp);
    }

    #[test]
    fn unknown_predictor_is_named() {
        let cfg = RunConfig::parse(&BASIC.replace(r#"network = ["a", "b"]"#, r#"network = ["a", "wind"]"#)).unwrap();
        let err = cfg.model.unwrap().pp_spec(&names()).unwrap_err().to_string();
        assert!(err.contains("wind") && err.contains("q.network"), "{err}");
    }

    #[test]
    fn overlapping_partition_rejected() {
        let cfg = RunConfig::parse(&BASIC.replace(r#"network = ["a", "b"]"#, r#"network = ["a", "temp"]"#)).unwrap();
        assert!(cfg.model.unwrap().pp_spec(&names()).is_err());
    }

    #[test]
    fn unknown_keys_and_missing_sections() {
        assert!(RunConfig::parse(&format!("{BASIC}\nbogus = 1\n")).is_err());
        let cfg = RunConfig::parse("task = \"sweep\"\n[data]\npath = \"x.csv\"\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_and_seed_override() {
        let text = format!("{BASIC}\n[sweep]\nover = \"p_u\"\nvalues = [0.6, 0.7]\n[bootstrap]\nreplicates = 3\nmean_block = 2.0\nseed = 1\nepochs = 5\n");
        let cfg = RunConfig::parse(&text).unwrap().with_seed(99);
        assert_eq!(cfg.sweep.as_ref().unwrap().len(), 2);
        assert_eq!((cfg.training.seed, cfg.folds.plan.seed, cfg.bootstrap.unwrap().plan.seed), (99, 99, 99));
        let forms = RunConfig::parse(&format!("{BASIC}\n[sweep]\nover = \"form\"\nvalues = [\"fully-linear\", \"lin-gam-nn\"]\n")).unwrap();
        assert_eq!(forms.sweep.unwrap(), SweepConfig::Form { values: vec![Form::FullyLinear, Form::LinGamNn] });
    }
}
