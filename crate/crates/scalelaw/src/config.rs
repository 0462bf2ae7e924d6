//! Run configuration for the command-line front end.
//!
//! Configs are TOML. Unknown keys are rejected so typos fail loudly.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asymptotics::log_grid;
use crate::simulator::OptimizerKind;
use crate::spectrum::{LimitMode, Spectrum, SystemShape};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown sweep parameter `{0}` (expected one of N, P, B, E, eta, a, b)")]
    UnknownSweepKey(String),
    #[error("sweep parameter `{key}` does not apply: {reason}")]
    InapplicableSweepKey { key: String, reason: String },
    #[error("sweep over `{0}` has no values")]
    EmptySweep(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Simulate,
    Dmft,
    Fourier,
    Sgd,
    Ensemble,
    Asymptote,
    Frontier,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Simulate => "simulate",
            Self::Dmft => "dmft",
            Self::Fourier => "fourier",
            Self::Sgd => "sgd",
            Self::Ensemble => "ensemble",
            Self::Asymptote => "asymptote",
            Self::Frontier => "frontier",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLawBlock {
    pub a: f64,
    pub b: f64,
    pub modes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhiteBlock {
    pub modes: usize,
}

/// Exactly one source must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumBlock {
    pub power_law: Option<PowerLawBlock>,
    pub white: Option<WhiteBlock>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeBlock {
    #[serde(rename = "N")]
    pub model_size: Option<f64>,
    #[serde(rename = "P")]
    pub dataset_size: Option<f64>,
    pub nu: Option<f64>,
    pub alpha: Option<f64>,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub limit: LimitMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    pub kind: Option<OptimizerKind>,
    pub eta: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
    pub batch: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    100
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            kind: None,
            eta: None,
            momentum: 0.0,
            batch: None,
            steps: default_steps(),
        }
    }
}

/// Log-spaced grid `[min, max]` with `points` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl LogGrid {
    pub fn values(&self) -> Vec<f64> {
        log_grid(self.min, self.max, self.points)
    }

    fn check(&self, what: &str) -> Result<(), ConfigError> {
        if !(self.min > 0.0 && self.max >= self.min && self.points >= 1 && self.max.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "{what} grid needs 0 < min <= max < inf and points >= 1"
            )));
        }
        Ok(())
    }
}

impl Default for LogGrid {
    fn default() -> Self {
        Self {
            min: 0.1,
            max: 1000.0,
            points: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    #[serde(rename = "E", default = "one")]
    pub members: usize,
    #[serde(default = "one")]
    pub bags: usize,
    /// Gradient flow on the `[times]` grid instead of discrete steps.
    #[serde(default)]
    pub continuous: bool,
    /// Optional fixed-compute comparison: `N·E = total_width` for each listed `E`.
    pub total_width: Option<f64>,
    #[serde(default)]
    pub split: Vec<usize>,
}

fn one() -> usize {
    1
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self {
            members: 1,
            bags: 1,
            continuous: false,
            total_width: None,
            split: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontierBlock {
    pub widths: Vec<f64>,
    pub compute: LogGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityBlock {
    #[serde(default)]
    pub mode: usize,
    pub rates: LogGrid,
    #[serde(default = "default_offset")]
    pub offset: f64,
}

fn default_offset() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerancesBlock {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    500
}

impl Default for TolerancesBlock {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    ModelSize,
    DatasetSize,
    Batch,
    Ensemble,
    LearningRate,
    SpectrumDecay,
    TargetDecay,
}

impl SweepParameter {
    pub fn parse(key: &str) -> Result<Self, ConfigError> {
        Ok(match key {
            "N" => Self::ModelSize,
            "P" => Self::DatasetSize,
            "B" => Self::Batch,
            "E" => Self::Ensemble,
            "eta" => Self::LearningRate,
            "a" => Self::SpectrumDecay,
            "b" => Self::TargetDecay,
            other => return Err(ConfigError::UnknownSweepKey(other.to_string())),
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::ModelSize => "N",
            Self::DatasetSize => "P",
            Self::Batch => "B",
            Self::Ensemble => "E",
            Self::LearningRate => "eta",
            Self::SpectrumDecay => "a",
            Self::TargetDecay => "b",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Also write the discrete order-parameter matrices as binary files.
    #[serde(default)]
    pub dump_matrices: bool,
    pub spectrum: SpectrumBlock,
    pub shape: ShapeBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub times: LogGrid,
    #[serde(default)]
    pub tolerances: TolerancesBlock,
    pub ensemble: Option<EnsembleBlock>,
    pub frontier: Option<FrontierBlock>,
    pub density: Option<DensityBlock>,
    pub sweep: Option<SweepBlock>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        // Relative paths in the config resolve against the config's directory.
        if let Some(dir) = path.parent() {
            if let Some(f) = cfg.spectrum.file.as_mut() {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML rendering, used for the provenance hash and manifest echo.
    pub fn canonical(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.spectrum;
        let sources = s.power_law.is_some() as u8 + s.white.is_some() as u8 + s.file.is_some() as u8;
        if sources != 1 {
            return Err(ConfigError::Invalid(format!(
                "[spectrum] needs exactly one of power_law, white, file (found {sources})"
            )));
        }
        let sh = &self.shape;
        if sh.model_size.is_some() == sh.nu.is_some() {
            return Err(ConfigError::Invalid("[shape] needs exactly one of N, nu".into()));
        }
        if sh.dataset_size.is_some() == sh.alpha.is_some() {
            return Err(ConfigError::Invalid("[shape] needs exactly one of P, alpha".into()));
        }
        if (sh.nu.is_some() || sh.alpha.is_some()) && sh.limit == LimitMode::NonProportional {
            return Err(ConfigError::Invalid("ratios nu, alpha need the proportional limit".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if let Some(eta) = self.optimizer.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(ConfigError::Invalid(format!("eta must be positive, got {eta}")));
            }
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(ConfigError::Invalid("momentum must lie in [0, 1)".into()));
        }
        if self.optimizer.steps == 0 {
            return Err(ConfigError::Invalid("steps must be at least 1".into()));
        }
        if self.optimizer.batch == Some(0) {
            return Err(ConfigError::Invalid("batch must be at least 1".into()));
        }
        self.times.check("[times]")?;
        match self.solver {
            SolverKind::Sgd if self.optimizer.batch.is_none() => {
                return Err(ConfigError::Invalid("solver sgd needs optimizer.batch".into()));
            }
            SolverKind::Simulate if self.optimizer.kind == Some(OptimizerKind::OnePassSgd) && self.optimizer.batch.is_none() => {
                return Err(ConfigError::Invalid("one_pass_sgd needs optimizer.batch".into()));
            }
            SolverKind::Ensemble if self.ensemble.is_none() => {
                return Err(ConfigError::Invalid("solver ensemble needs an [ensemble] block".into()));
            }
            SolverKind::Frontier => {
                let f = self
                    .frontier
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("solver frontier needs a [frontier] block".into()))?;
                if f.widths.is_empty() || f.widths.iter().any(|w| !(*w >= 1.0)) {
                    return Err(ConfigError::Invalid("frontier.widths must be non-empty and >= 1".into()));
                }
                f.compute.check("frontier.compute")?;
            }
            _ => {}
        }
        if let Some(e) = &self.ensemble {
            if e.members == 0 || e.bags == 0 || e.split.contains(&0) {
                return Err(ConfigError::Invalid("ensemble counts must be at least 1".into()));
            }
        }
        if let Some(d) = &self.density {
            d.rates.check("density.rates")?;
        }
        if let Some(sw) = &self.sweep {
            self.check_sweep(sw)?;
        }
        Ok(())
    }

    fn check_sweep(&self, sw: &SweepBlock) -> Result<SweepParameter, ConfigError> {
        let param = SweepParameter::parse(&sw.parameter)?;
        if sw.values.is_empty() {
            return Err(ConfigError::EmptySweep(sw.parameter.clone()));
        }
        let inapplicable = |reason: &str| ConfigError::InapplicableSweepKey {
            key: sw.parameter.clone(),
            reason: reason.to_string(),
        };
        match param {
            SweepParameter::SpectrumDecay | SweepParameter::TargetDecay if self.spectrum.power_law.is_none() => {
                return Err(inapplicable("needs a power_law spectrum"));
            }
            SweepParameter::Ensemble if self.ensemble.is_none() => {
                return Err(inapplicable("needs an [ensemble] block"));
            }
            SweepParameter::ModelSize if self.shape.nu.is_some() => {
                return Err(inapplicable("shape is given by nu; sweep N needs N"));
            }
            SweepParameter::DatasetSize if self.shape.alpha.is_some() => {
                return Err(inapplicable("shape is given by alpha; sweep P needs P"));
            }
            _ => {}
        }
        Ok(param)
    }

    /// The configured sweep with duplicate values removed, plus any duplicates dropped.
    pub fn sweep_plan(&self) -> Result<Option<(SweepParameter, Vec<f64>, Vec<f64>)>, ConfigError> {
        let Some(sw) = &self.sweep else { return Ok(None) };
        let param = self.check_sweep(sw)?;
        let mut kept: Vec<f64> = Vec::with_capacity(sw.values.len());
        let mut dropped = Vec::new();
        for &v in &sw.values {
            if kept.contains(&v) {
                dropped.push(v);
            } else {
                kept.push(v);
            }
        }
        Ok(Some((param, kept, dropped)))
    }

    /// Copy of this config with one parameter set and the sweep removed.
    pub fn with_parameter(&self, param: SweepParameter, value: f64) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        let count = |what: &str| -> Result<usize, ConfigError> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(ConfigError::Invalid(format!("{what} must be a positive integer, got {value}")))
            }
        };
        match param {
            SweepParameter::ModelSize => cfg.shape.model_size = Some(value),
            SweepParameter::DatasetSize => cfg.shape.dataset_size = Some(value),
            SweepParameter::Batch => cfg.optimizer.batch = Some(count("B")?),
            SweepParameter::Ensemble => {
                if let Some(e) = cfg.ensemble.as_mut() {
                    e.members = count("E")?;
                }
            }
            SweepParameter::LearningRate => cfg.optimizer.eta = Some(value),
            SweepParameter::SpectrumDecay => {
                if let Some(p) = cfg.spectrum.power_law.as_mut() {
                    p.a = value;
                }
            }
            SweepParameter::TargetDecay => {
                if let Some(p) = cfg.spectrum.power_law.as_mut() {
                    p.b = value;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_spectrum(&self) -> Result<Spectrum, ConfigError> {
        let s = &self.spectrum;
        let built = if let Some(p) = s.power_law {
            Spectrum::power_law(p.a, p.b, p.modes)
        } else if let Some(w) = s.white {
            Spectrum::white(w.modes)
        } else if let Some(path) = &s.file {
            Spectrum::from_file(path)
        } else {
            return Err(ConfigError::Invalid("no spectrum source".into()));
        };
        built.map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn build_shape(&self, modes: usize) -> Result<SystemShape, ConfigError> {
        let sh = &self.shape;
        let m = modes as f64;
        let n = sh.model_size.or(sh.nu.map(|v| v * m)).unwrap_or(f64::NAN);
        let p = sh.dataset_size.or(sh.alpha.map(|v| v * m)).unwrap_or(f64::NAN);
        SystemShape::new(n, p, sh.sigma, sh.limit).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
solver = "dmft"
seeds = [1, 2]

[spectrum]
power_law = { a = 1.5, b = 1.25, modes = 64 }

[shape]
N = 32
P = 48
sigma = 0.1
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = RunConfig::parse(BASE).unwrap();
        let spec = cfg.build_spectrum().unwrap();
        let shape = cfg.build_shape(spec.modes()).unwrap();
        assert_eq!(shape.model_size, 32.0);
        assert_eq!(cfg.optimizer.steps, 100);
        assert_eq!(cfg.hash(), RunConfig::parse(BASE).unwrap().hash());
    }

    #[test]
    fn rejects_two_spectrum_sources() {
        let text = BASE.replace("[shape]", "white = { modes = 8 }\n\n[shape]");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn infinite_dataset() {
        let cfg = RunConfig::parse(&BASE.replace("P = 48", "P = inf")).unwrap();
        assert!(cfg.build_shape(64).unwrap().dataset_size.is_infinite());
    }

    #[test]
    fn sweep_keys() {
        let bad = format!("{BASE}\n[sweep]\nparameter = \"width\"\nvalues = [1.0]\n");
        let err = RunConfig::parse(&bad).unwrap_err();
        assert!(err.to_string().contains("width"));
        let empty = format!("{BASE}\n[sweep]\nparameter = \"N\"\nvalues = []\n");
        assert!(matches!(RunConfig::parse(&empty), Err(ConfigError::EmptySweep(_))));
        let dup = format!("{BASE}\n[sweep]\nparameter = \"N\"\nvalues = [8, 16, 8]\n");
        let cfg = RunConfig::parse(&dup).unwrap();
        let (p, kept, dropped) = cfg.sweep_plan().unwrap().unwrap();
        assert_eq!(p, SweepParameter::ModelSize);
        assert_eq!(kept, [8.0, 16.0]);
        assert_eq!(dropped, [8.0]);
        let cell = cfg.with_parameter(p, 16.0).unwrap();
        assert_eq!(cell.shape.model_size, Some(16.0));
        assert!(cell.sweep.is_none());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse(&BASE.replace("sigma", "sigmaa")).unwrap_err();
        assert!(err.to_string().contains("sigmaa"));
    }
}
