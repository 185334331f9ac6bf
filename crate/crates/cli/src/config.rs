//! Experiment configuration: flat TOML with one table per concern.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use wflow::datasets::{AnalyticDensity, Dataset, DensitySpec};
use wflow::numcore::Tensor;
use wflow::objectives::{FmOptions, GammaSchedule, TrainConfig};
use wflow::rng::{stream, Rng};
use wflow::transport::RiskFunction;
use wflow::velocity::{Activation, FieldSpec};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TrainCnf,
    TrainJko,
    TrainFm,
    TrainLfm,
    Ot,
    Dre,
    Dro,
    Eval,
    Sample,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

/// A dataset preset, optionally translated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub count: usize,
    /// Sampling seed; derived from the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
}

/// Samples plus the exact density when the preset has one.
pub struct Source {
    pub samples: Tensor,
    pub density: Option<AnalyticDensity>,
}

impl DataSection {
    pub fn dataset(&self) -> Result<(Dataset, Option<AnalyticDensity>), CliError> {
        let ds = Dataset::preset(&self.preset, self.dim.unwrap_or(2))?;
        let density = match (ds.density(), &self.shift) {
            (Some(d), None) => Some(d.clone()),
            (Some(d), Some(s)) => Some(shift_density(d, s)?),
            (None, _) => None,
        };
        if let Some(s) = &self.shift {
            if s.len() != ds.dim() {
                return Err(CliError::config(format!(
                    "shift has {} entries but preset `{}` is {}-dimensional",
                    s.len(),
                    self.preset,
                    ds.dim()
                )));
            }
        }
        Ok((ds, density))
    }

    pub fn draw(&self) -> Result<Source, CliError> {
        self.draw_n(self.count, 0)
    }

    /// `n` rows from sampling stream `k` of this section's seed.
    pub fn draw_n(&self, n: usize, k: u64) -> Result<Source, CliError> {
        if n == 0 {
            return Err(CliError::config("dataset count must be at least 1"));
        }
        let (ds, density) = self.dataset()?;
        let mut rng = stream(self.seed.expect("filled by resolve"), k);
        let mut samples = ds.sample(&mut rng, n);
        if let Some(s) = &self.shift {
            let d = s.len();
            for (i, v) in samples.data_mut().iter_mut().enumerate() {
                *v += s[i % d];
            }
        }
        Ok(Source { samples, density })
    }
}

fn shift_density(d: &AnalyticDensity, shift: &[f64]) -> Result<AnalyticDensity, CliError> {
    let move_mean = |mean: &mut Vec<f64>| {
        for (m, s) in mean.iter_mut().zip(shift) {
            *m += s;
        }
    };
    let mut spec = DensitySpec::from(d.clone());
    match &mut spec {
        DensitySpec::Gaussian(g) => move_mean(&mut g.mean),
        DensitySpec::Mixture { components, .. } => components.iter_mut().for_each(|g| move_mean(&mut g.mean)),
    }
    Ok(AnalyticDensity::try_from(spec)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub blocks: usize,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            blocks: 6,
            steps: 8,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn field_spec(&self, dim: usize) -> FieldSpec {
        FieldSpec::new(dim).with_hidden(&self.hidden).with_activation(self.activation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtSection {
    pub gamma: f64,
    pub refit_every: usize,
}

impl Default for OtSection {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            refit_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DreSection {
    pub gammas: Vec<f64>,
    /// Grid box; the padded sample bounding box when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    pub per_axis: usize,
    pub min_density: f64,
}

impl Default for DreSection {
    fn default() -> Self {
        Self {
            gammas: vec![0.1, 0.2, 0.3, 0.5, 0.8, 1.2],
            lower: None,
            upper: None,
            per_axis: 41,
            min_density: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskKind {
    Constant,
    Linear,
    Quadratic,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroSection {
    pub gamma: f64,
    pub risk: RiskKind,
    /// Constant risk value.
    pub value: f64,
    /// Linear risk `cᵀx`.
    pub c: Vec<f64>,
    /// Quadratic risk `(w/2)‖x − center‖²`.
    pub center: Vec<f64>,
    pub weight: f64,
    /// Logistic classifier risk.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub label: bool,
    pub guard_window: usize,
    pub guard_min_drop: f64,
}

impl Default for DroSection {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            risk: RiskKind::Linear,
            value: 0.0,
            c: Vec::new(),
            center: Vec::new(),
            weight: 1.0,
            weights: Vec::new(),
            bias: 0.0,
            label: true,
            guard_window: 500,
            guard_min_drop: 0.5,
        }
    }
}

impl DroSection {
    pub fn risk_function(&self) -> RiskFunction {
        match self.risk {
            RiskKind::Constant => RiskFunction::Constant(self.value),
            RiskKind::Linear => RiskFunction::Linear { c: self.c.clone() },
            RiskKind::Quadratic => RiskFunction::Quadratic {
                center: self.center.clone(),
                weight: self.weight,
            },
            RiskKind::Classifier => RiskFunction::ClassifierLoss {
                weights: self.weights.clone(),
                bias: self.bias,
                label: self.label,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nll,
    KlMc,
    Mmd,
    Fid,
    W2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: Vec<Metric>,
    /// Chain to evaluate; two datasets are compared when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Held-out or generated sample size.
    pub count: usize,
    pub permutations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Nll, Metric::KlMc],
            checkpoint: None,
            count: 1000,
            permutations: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub checkpoint: PathBuf,
    #[serde(default = "default_sample_count")]
    pub count: usize,
}

fn default_sample_count() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; not part of the echo.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DataSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_schedule")]
    pub schedule: GammaSchedule,
    #[serde(default)]
    pub fm: FmOptions,
    #[serde(default)]
    pub ot: OtSection,
    /// Classifier training for ratio-based terms.
    #[serde(default = "default_ratio")]
    pub ratio: TrainConfig,
    #[serde(default)]
    pub dre: DreSection,
    #[serde(default)]
    pub dro: DroSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSection>,
}

fn default_schedule() -> GammaSchedule {
    GammaSchedule::Constant { gamma: 1.0 }
}

fn default_ratio() -> TrainConfig {
    TrainConfig {
        iterations: 200,
        learn_rate: 1e-2,
        batch_size: 256,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        // relative checkpoint paths are taken from the config file's
        // directory and echoed as absolute paths
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
            if let Ok(abs) = std::path::absolute(&*p) {
                *p = abs;
            }
        };
        if let Some(p) = cfg.eval.checkpoint.as_mut() {
            rebase(p);
        }
        if let Some(s) = cfg.sample.as_mut() {
            rebase(&mut s.checkpoint);
        }
        Ok(cfg)
    }

    /// Applies command-line overrides and fills every derived seed so the
    /// echo alone reproduces the run.
    pub fn resolve(mut self, task: Task, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(t) = self.task {
            if t != task {
                return Err(CliError::config(format!("config is for task `{t}` but `{task}` was requested")));
            }
        }
        self.task = Some(task);
        if let Some(s) = seed {
            self.seed = s;
        }
        let base = self.seed;
        self.train.seed = base;
        self.ratio.seed = base;
        for (k, d) in [self.data.as_mut(), self.target.as_mut()].into_iter().enumerate() {
            if let Some(d) = d {
                d.seed.get_or_insert(base.wrapping_add(k as u64 + 1));
            }
        }
        self.train.validate()?;
        self.ratio.validate()?;
        Ok(self)
    }

    pub fn data(&self) -> Result<&DataSection, CliError> {
        self.data.as_ref().ok_or_else(|| CliError::config("missing [data] section"))
    }

    pub fn target(&self) -> Result<&DataSection, CliError> {
        self.target.as_ref().ok_or_else(|| CliError::config("missing [target] section"))
    }

    pub fn echo_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task(&self) -> Task {
        self.task.expect("resolved")
    }

    /// Stream `k` of the run seed, for randomness outside training.
    pub fn rng(&self, k: u64) -> Rng {
        stream(self.seed, 1_000 + k)
    }
}
