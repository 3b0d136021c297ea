//! The run configuration document.
//!
//! A TOML file with a `version` key and one table per concern. Unknown keys
//! anywhere are rejected before any work starts.
//!
//! ```toml
//! version = 1
//! output_dir = "runs/mixture"
//! alpha = 0.1
//!
//! [data]
//! generator = { name = "mixture" }
//! n = 5000
//! seed = 7
//!
//! [split]
//! seed = 3
//! sizes = { counts = { train = 3375, calibration = 1125, test = 500 } }
//!
//! [method]
//! name = "contra"
//! [method.flow]
//! epochs = 200
//! ```

use std::path::{Path, PathBuf};

use contra::baselines::DEFAULT_PCP_SAMPLES;
use contra::data::{load_csv, Dataset, Generator, SplitSizes, SplitSpec};
use contra::eval::{ExperimentConfig, Method};
use contra::flow::FlowConfig;
use contra::mcqr::McqrConfig;
use contra::rescontra::{KernelRidgeConfig, DEFAULT_PREDICTOR_FRACTION};
use contra::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub eval: Option<ExperimentConfig>,
}

fn default_alpha() -> f64 {
    0.1
}

/// Either a named generator or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default)]
    pub generator: Option<Generator>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub p: Option<usize>,
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default = "yes")]
    pub header: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub name: Method,
    pub seed: u64,
    pub flow: FlowConfig,
    pub mcqr: McqrConfig,
    pub krr: KernelRidgeConfig,
    pub pcp_samples: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            name: Method::Contra,
            seed: 0,
            flow: FlowConfig::default(),
            mcqr: McqrConfig::default(),
            krr: KernelRidgeConfig::default(),
            pcp_samples: DEFAULT_PCP_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub boundary_points: usize,
    pub volume_samples: usize,
    /// Coverage levels drawn in the SVG, e.g. 0.5, 0.7, 0.9.
    pub levels: Vec<f64>,
    /// Conditional samples scattered under the SVG outlines.
    pub scatter_samples: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            boundary_points: 256,
            volume_samples: 10_000,
            levels: vec![0.5, 0.7, 0.9],
            scatter_samples: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(d) = &self.data {
            d.validate()?;
        }
        if let Some(e) = &self.eval {
            e.validate()?;
        }
        let p = &self.predict;
        if p.boundary_points < 3 {
            return Err(Error::Config("predict.boundary_points must be at least 3".into()));
        }
        if p.volume_samples < 100 {
            return Err(Error::Config("predict.volume_samples must be at least 100".into()));
        }
        if p.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::Config("predict.levels must lie in (0, 1)".into()));
        }
        if self.method.pcp_samples == 0 {
            return Err(Error::Config("method.pcp_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataSource> {
        self.data.as_ref().ok_or_else(|| Error::Config("missing [data] table".into()))
    }

    /// The configured split, or 60/20/20 ratios seeded from the method seed.
    pub fn split_spec(&self) -> SplitSpec {
        self.split.clone().unwrap_or(SplitSpec {
            sizes: SplitSizes::Ratios {
                train: 0.6,
                calibration: 0.2,
                test: 0.2,
            },
            seed: self.method.seed,
            predictor_fraction: None,
        })
    }

    pub fn predictor_fraction(&self) -> f64 {
        self.split_spec().predictor_fraction.unwrap_or(DEFAULT_PREDICTOR_FRACTION)
    }

    /// `path` relative to the output directory, created on demand.
    pub fn output(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)?;
        Ok(self.output_dir.join(name))
    }
}

impl DataSource {
    pub fn validate(&self) -> Result<()> {
        match (&self.generator, &self.csv) {
            (Some(_), None) => {
                if self.n.unwrap_or(0) == 0 {
                    return Err(Error::Config("data.n must be a positive row count for generated data".into()));
                }
            }
            (None, Some(_)) => {
                if self.p.is_none() || self.q.is_none() {
                    return Err(Error::Config("CSV data needs data.p and data.q column counts".into()));
                }
            }
            _ => return Err(Error::Config("[data] needs exactly one of `generator` or `csv`".into())),
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Dataset> {
        match (&self.generator, &self.csv) {
            (Some(g), _) => g.generate(self.n.unwrap_or(0), self.seed),
            (None, Some(path)) => load_csv(path, self.p.unwrap_or(0), self.q.unwrap_or(0), self.header),
            _ => Err(Error::Config("[data] needs exactly one of `generator` or `csv`".into())),
        }
    }
}
