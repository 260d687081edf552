//! TOML run configuration.
//!
//! ```toml
//! dims = [32, 32]          # grid shape, 1 to 3 axes
//! labels = 2               # label count m
//! unary = "unary.pmpm"     # [N, m] f64 tensor of potentials (nats) ...
//! # unary_pgm = ["p0.pgm", "p1.pgm"]   # ... or one probability image per label
//! seed = 0
//! samples = 200
//! threshold = 0.0
//! backend = "exact"        # or "lattice"
//! max_iterations = 10
//! convergence_tol = 1e-5
//! euler_shift = true
//! # epsilon = 0.1          # with delta: echo the required sample size
//! # delta = 0.05
//!
//! [[kernel]]
//! weight = 1.0
//! bandwidths = [1.0]       # one value for every axis, or one per axis
//! # appearance = "img.pgm" # optional extra features: PGM or [N] / [N, c] f64 tensor
//! # appearance_bandwidths = [10.0]
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf_model::{build_grid_model, Appearance, DenseCrfModel, KernelSpec, LabelSet, UnaryField};
use crate::error::{Error, Result};
use crate::evaluation::{Geometry, SampleMode, SyntheticExperimentConfig};
use crate::io::pgm::{probabilities_from_pgms, read_pgm};
use crate::io::tensor::{read_tensor, unary_from_tensor, TensorData};
use crate::mean_field::{Backend, InferenceConfig};
use crate::metrics::required_sample_size;
use crate::perturbation::SamplingConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    weight: f64,
    bandwidths: Vec<f64>,
    appearance: Option<PathBuf>,
    appearance_bandwidths: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    dims: Vec<usize>,
    #[serde(alias = "m")]
    labels: usize,
    unary: Option<PathBuf>,
    unary_pgm: Option<Vec<PathBuf>>,
    seed: Option<u64>,
    samples: Option<usize>,
    threshold: Option<f64>,
    backend: Option<String>,
    max_iterations: Option<usize>,
    convergence_tol: Option<f64>,
    euler_shift: Option<bool>,
    epsilon: Option<f64>,
    delta: Option<f64>,
    #[serde(default)]
    kernel: Vec<RawKernel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnarySource {
    Tensor(PathBuf),
    Pgm(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelConfig {
    pub weight: f64,
    pub bandwidths: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub appearance: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub appearance_bandwidths: Option<Vec<f64>>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dims: Vec<usize>,
    pub labels: usize,
    pub unary: UnarySource,
    pub seed: u64,
    pub samples: usize,
    pub threshold: f64,
    pub backend: String,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub euler_shift: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Derived from `epsilon`, `delta` and `labels`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub required_samples: Option<u64>,
    pub kernel: Vec<KernelConfig>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses and validates config text; relative paths are resolved against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let raw: RawRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let unary = match (raw.unary, raw.unary_pgm) {
        (Some(p), None) => UnarySource::Tensor(resolve(base, p)),
        (None, Some(ps)) => UnarySource::Pgm(ps.into_iter().map(|p| resolve(base, p)).collect()),
        (None, None) => return config_err("one of `unary` or `unary_pgm` is required"),
        (Some(_), Some(_)) => return config_err("`unary` and `unary_pgm` are mutually exclusive"),
    };
    let defaults = SamplingConfig::default();
    let inference = InferenceConfig::default();
    let cfg = RunConfig {
        dims: raw.dims,
        labels: raw.labels,
        unary,
        seed: raw.seed.unwrap_or(defaults.seed),
        samples: raw.samples.unwrap_or(defaults.samples),
        threshold: raw.threshold.unwrap_or(0.0),
        backend: raw.backend.unwrap_or_else(|| inference.backend.to_string()),
        max_iterations: raw.max_iterations.unwrap_or(inference.max_iterations),
        convergence_tol: raw.convergence_tol.unwrap_or(inference.convergence_tol),
        euler_shift: raw.euler_shift.unwrap_or(defaults.euler_shift),
        epsilon: raw.epsilon,
        delta: raw.delta,
        required_samples: None,
        kernel: raw
            .kernel
            .into_iter()
            .map(|k| KernelConfig {
                weight: k.weight,
                bandwidths: k.bandwidths,
                appearance: k.appearance.map(|p| resolve(base, p)),
                appearance_bandwidths: k.appearance_bandwidths,
            })
            .collect(),
    };
    cfg.validated()
}

impl RunConfig {
    /// Checks every field and fills in derived values.
    pub fn validated(mut self) -> Result<Self> {
        if self.dims.is_empty() || self.dims.len() > 3 || self.dims.contains(&0) {
            return config_err(format!("`dims` must have 1 to 3 positive entries, got {:?}", self.dims));
        }
        if self.labels < 2 {
            return config_err(format!("`labels` must be at least 2, got {}", self.labels));
        }
        if let UnarySource::Pgm(ps) = &self.unary {
            if ps.len() != self.labels {
                return config_err(format!("`unary_pgm` lists {} images for {} labels", ps.len(), self.labels));
            }
        }
        if self.samples == 0 {
            return config_err("`samples` must be at least 1");
        }
        if !(self.threshold >= 0.0) {
            return config_err(format!("`threshold` must be non-negative, got {}", self.threshold));
        }
        let backend: Backend = self.backend.parse().map_err(|e: Error| Error::Config(format!("`backend`: {e}")))?;
        self.backend = backend.to_string();
        self.inference().validate().map_err(|e| Error::Config(e.to_string()))?;
        for (k, kernel) in self.kernel.iter().enumerate() {
            if !(kernel.weight >= 0.0 && kernel.weight.is_finite()) {
                return config_err(format!("`kernel[{k}].weight` must be finite and non-negative"));
            }
            if kernel.bandwidths.is_empty() || kernel.bandwidths.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
                return config_err(format!("`kernel[{k}].bandwidths` must be positive"));
            }
            if kernel.appearance.is_some() != kernel.appearance_bandwidths.is_some() {
                return config_err(format!(
                    "`kernel[{k}]`: `appearance` and `appearance_bandwidths` go together"
                ));
            }
        }
        self.required_samples = match (self.epsilon, self.delta) {
            (Some(e), Some(d)) => Some(
                required_sample_size(e, d, self.labels).map_err(|err| Error::Config(format!("`epsilon`/`delta`: {err}")))?,
            ),
            (None, None) => None,
            _ => return config_err("`epsilon` and `delta` must be given together"),
        };
        Ok(self)
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            max_iterations: self.max_iterations,
            convergence_tol: self.convergence_tol,
            backend: self.backend.parse().unwrap_or_default(),
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            samples: self.samples,
            seed: self.seed,
            euler_shift: self.euler_shift,
            inference: self.inference(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// The resolved configuration as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    fn load_unary(&self) -> Result<UnaryField> {
        let n = self.n_voxels();
        match &self.unary {
            UnarySource::Tensor(p) => unary_from_tensor(&read_tensor(p)?, n, self.labels),
            UnarySource::Pgm(ps) => {
                let images = ps.iter().map(read_pgm).collect::<Result<Vec<_>>>()?;
                UnaryField::from_probabilities(n, self.labels, &probabilities_from_pgms(&images, n)?)
            }
        }
    }

    fn load_appearance(&self, path: &Path) -> Result<Vec<f64>> {
        let n = self.n_voxels();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            let img = read_pgm(path)?;
            if img.pixels.len() != n {
                return Err(Error::Shape(format!("appearance image has {} pixels, grid has {n}", img.pixels.len())));
            }
            return Ok(img.pixels.iter().map(|&p| p as f64).collect());
        }
        let t = read_tensor(path)?;
        match (t.data(), t.dims()) {
            (TensorData::F64(v), [rows, ..]) if *rows == n => Ok(v.clone()),
            _ => Err(Error::Shape(format!(
                "appearance tensor must be f64 with {n} rows, found {:?} {:?}",
                t.dtype(),
                t.dims()
            ))),
        }
    }

    /// Reads the unary and appearance files and builds the model.
    pub fn load_model(&self) -> Result<DenseCrfModel> {
        let unary = self.load_unary()?;
        let mut specs = Vec::with_capacity(self.kernel.len());
        for k in &self.kernel {
            let appearance = match (&k.appearance, &k.appearance_bandwidths) {
                (Some(p), Some(b)) => Some(Appearance { values: self.load_appearance(p)?, bandwidths: b.clone() }),
                _ => None,
            };
            specs.push(KernelSpec { weight: k.weight, spatial_bandwidths: k.bandwidths.clone(), appearance });
        }
        build_grid_model(&self.dims, LabelSet::new(self.labels)?, unary, &specs)
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    grid_sizes: Option<Vec<usize>>,
    sample_counts: Option<Vec<usize>>,
    n_inits: Option<usize>,
    seed: Option<u64>,
    kernel_weight: Option<f64>,
    kernel_bandwidth: Option<f64>,
    geometry: Option<String>,
    mode: Option<String>,
    log_errors: Option<bool>,
    euler_shift: Option<bool>,
    max_iterations: Option<usize>,
    convergence_tol: Option<f64>,
}

/// Synthetic-experiment config; every key is optional:
/// `grid_sizes`, `sample_counts`, `n_inits`, `seed`, `kernel_weight`,
/// `kernel_bandwidth`, `geometry` ("grid" | "line"), `mode`
/// ("nested" | "independent"), `log_errors`, `euler_shift`,
/// `max_iterations`, `convergence_tol`.
pub fn parse_experiment_str(text: &str) -> Result<SyntheticExperimentConfig> {
    let raw: RawExperiment = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let d = SyntheticExperimentConfig::default();
    let cfg = SyntheticExperimentConfig {
        grid_sizes: raw.grid_sizes.unwrap_or(d.grid_sizes),
        sample_counts: raw.sample_counts.unwrap_or(d.sample_counts),
        n_inits: raw.n_inits.unwrap_or(d.n_inits),
        base_seed: raw.seed.unwrap_or(d.base_seed),
        kernel_weight: raw.kernel_weight.unwrap_or(d.kernel_weight),
        kernel_bandwidth: raw.kernel_bandwidth.unwrap_or(d.kernel_bandwidth),
        geometry: match raw.geometry {
            Some(g) => g.parse::<Geometry>().map_err(|e| Error::Config(format!("`geometry`: {e}")))?,
            None => d.geometry,
        },
        mode: match raw.mode.as_deref() {
            None | Some("nested") => SampleMode::Nested,
            Some("independent") => SampleMode::Independent,
            Some(other) => return config_err(format!("`mode`: unknown sampling mode '{other}'")),
        },
        log_errors: raw.log_errors.unwrap_or(d.log_errors),
        euler_shift: raw.euler_shift.unwrap_or(d.euler_shift),
        inference: InferenceConfig {
            max_iterations: raw.max_iterations.unwrap_or(d.inference.max_iterations),
            convergence_tol: raw.convergence_tol.unwrap_or(d.inference.convergence_tol),
            backend: Backend::Exact,
        },
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_experiment(path: impl AsRef<Path>) -> Result<SyntheticExperimentConfig> {
    let path = path.as_ref();
    parse_experiment_str(&fs::read_to_string(path)?).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// TOML echo of an experiment config.
pub fn echo_experiment(cfg: &SyntheticExperimentConfig) -> String {
    #[derive(Serialize)]
    struct Echo<'a> {
        grid_sizes: &'a [usize],
        sample_counts: &'a [usize],
        n_inits: usize,
        seed: u64,
        kernel_weight: f64,
        kernel_bandwidth: f64,
        geometry: &'a str,
        mode: &'a str,
        log_errors: bool,
        euler_shift: bool,
        max_iterations: usize,
        convergence_tol: f64,
    }
    let echo = Echo {
        grid_sizes: &cfg.grid_sizes,
        sample_counts: &cfg.sample_counts,
        n_inits: cfg.n_inits,
        seed: cfg.base_seed,
        kernel_weight: cfg.kernel_weight,
        kernel_bandwidth: cfg.kernel_bandwidth,
        geometry: match cfg.geometry {
            Geometry::Line => "line",
            Geometry::Grid2d => "grid",
        },
        mode: match cfg.mode {
            SampleMode::Nested => "nested",
            SampleMode::Independent => "independent",
        },
        log_errors: cfg.log_errors,
        euler_shift: cfg.euler_shift,
        max_iterations: cfg.inference.max_iterations,
        convergence_tol: cfg.inference.convergence_tol,
    };
    toml::to_string(&echo).expect("experiment config serialises")
}
