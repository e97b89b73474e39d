//! TOML run configuration. Every section is optional and defaults fill the
//! rest; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use viscos::checks::CheckConfig;
use viscos::flows::FlowShape;
use viscos::training::{DatasetKind, DatasetParams, TrainConfig};
use viscos::viscos::FitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for flow initialization and, unless set per section, everything else.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub flow: FlowSection,
    pub train: TrainConfig,
    pub condition: ConditionSection,
    pub fit: FitConfig,
    pub sample: SampleSection,
    pub check: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataSection::default(),
            flow: FlowSection::default(),
            train: TrainConfig::default(),
            condition: ConditionSection::default(),
            fit: FitConfig::default(),
            sample: SampleSection::default(),
            check: CheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DatasetKind,
    /// CSV dataset (`y0..`, optional `m0..`) used instead of the generator.
    pub path: Option<PathBuf>,
    /// Generated samples, including the test split.
    pub n: usize,
    pub n_test: usize,
    pub dim: usize,
    pub seed: u64,
    pub params: DatasetParams,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            path: None,
            n: 12_000,
            n_test: 2_000,
            dim: 2,
            seed: 0,
            params: DatasetParams::default(),
        }
    }
}

/// Flow shape without the dimension, which comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub layers: usize,
    pub hidden: usize,
    pub lipschitz: f64,
    pub init_scale: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        let s = FlowShape::new(1);
        Self {
            layers: s.layers,
            hidden: s.hidden,
            lipschitz: s.lipschitz,
            init_scale: s.init_scale,
        }
    }
}

impl FlowSection {
    pub fn shape(&self, dim: usize) -> FlowShape {
        FlowShape {
            dim,
            layers: self.layers,
            hidden: self.hidden,
            lipschitz: self.lipschitz,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionSection {
    /// Observed indices applied to every row without its own mask columns.
    pub observed: Vec<usize>,
    /// Observation rows given inline.
    pub values: Vec<Vec<f64>>,
    /// Observation CSV in the dataset format; mask columns give per-row masks.
    pub observations: Option<PathBuf>,
    /// Inference network JSON; when set, posteriors come from one amortized pass.
    pub network: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 64, seed: 0 }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    /// Reads `path`, or the defaults when no file is given. Relative paths
    /// inside the file resolve against the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.path, &mut cfg.condition.observations, &mut cfg.condition.network]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// `--seed` replaces every seed in the file.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self.fit.seed = seed;
        self.sample.seed = seed;
        self.check.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}
