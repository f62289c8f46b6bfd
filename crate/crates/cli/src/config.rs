//! Strict TOML run configuration.
//!
//! Every section is optional and every key has a default. Unknown keys are
//! rejected with their full dotted path, type errors name the key they hit,
//! and numeric ranges are checked by the owning module's validator.
//!
//! The top-level `seed` is authoritative: it overwrites the per-module
//! `seed` keys of `data`, `train`, `flow` and `gradcheck`, so one number
//! reproduces a run. The corruption draws of `robustness` keep their own seed.

use std::path::{Path, PathBuf};

use dagr_core::diagnostics::ReportOptions;
use dagr_core::flow::FlowConfig;
use dagr_core::gradcheck::GradSuiteConfig;
use dagr_core::trainer::gap::TieMethod;
use dagr_core::trainer::robustness::{CorruptionKind, CorruptionSpec};
use dagr_core::trainer::{SyntheticDataConfig, TrainConfig};
use dagr_core::DagrError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Range { key: String, reason: String },
    #[error("cannot parse config at `{key}`: {message}")]
    Parse { key: String, message: String },
}

impl ConfigError {
    /// Dotted key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::UnknownKey(k) => Some(k),
            ConfigError::Range { key, .. } | ConfigError::Parse { key, .. } => Some(key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapSection {
    /// Also estimate the irreducible gap after `train`.
    pub enabled: bool,
    pub tie: TieMethod,
}

impl Default for GapSection {
    fn default() -> Self {
        Self {
            enabled: false,
            tie: TieMethod::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessSection {
    pub kinds: Vec<CorruptionKind>,
    pub target: usize,
    /// Empty means the default grid of each kind.
    pub severities: Vec<f64>,
    pub seed: u64,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            target: 1,
            severities: Vec::new(),
            seed: 0,
        }
    }
}

impl RobustnessSection {
    pub fn specs(&self) -> Vec<CorruptionSpec> {
        self.kinds
            .iter()
            .map(|&kind| CorruptionSpec {
                kind,
                target: self.target,
                severities: if self.severities.is_empty() {
                    CorruptionSpec::default_grid(kind)
                } else {
                    self.severities.clone()
                },
                seed: self.seed,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseSection {
    /// Embedding dump to analyse; the `--input` flag overrides it.
    pub input: Option<PathBuf>,
    pub report: ReportOptions,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            input: None,
            report: ReportOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Epochs (0 = before training) at which `train` writes embedding dumps.
    pub dump_embeddings: Vec<usize>,
    pub data: SyntheticDataConfig,
    pub train: TrainConfig,
    pub gap: GapSection,
    pub flow: FlowConfig,
    pub gradcheck: GradSuiteConfig,
    pub robustness: RobustnessSection,
    pub diagnose: DiagnoseSection,
}

fn scoped(section: &str, e: DagrError) -> ConfigError {
    match e {
        DagrError::Range { key, reason } => ConfigError::Range {
            key: format!("{section}.{key}"),
            reason,
        },
        other => ConfigError::Range {
            key: section.to_string(),
            reason: other.to_string(),
        },
    }
}

impl RunConfig {
    /// Propagates the top-level seed into every module config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self.flow.seed = seed;
        self.gradcheck.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate().map_err(|e| scoped("data", e))?;
        self.train.validate().map_err(|e| scoped("train", e))?;
        if let TieMethod::Penalty { lambda } = self.gap.tie {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(ConfigError::Range {
                    key: "gap.tie.lambda".into(),
                    reason: "must be > 0".into(),
                });
            }
        }
        self.flow.validate().map_err(|e| scoped("flow", e))?;
        self.gradcheck.validate().map_err(|e| scoped("gradcheck", e))?;
        for spec in self.robustness.specs() {
            spec.validate(self.data.modalities).map_err(|e| scoped("robustness", e))?;
        }
        self.diagnose.report.validate().map_err(|e| scoped("diagnose.report", e))?;
        Ok(())
    }

    /// Effective configuration as JSON, defaults included.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Parses TOML text strictly and validates it. The seed is propagated.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
        key: String::new(),
        message: e.message().to_string(),
    })?;
    let mut unknown = Vec::new();
    let mut track = |path: serde_ignored::Path<'_>| unknown.push(path.to_string());
    let tracked = serde_ignored::Deserializer::new(de, &mut track);
    let parsed: Result<RunConfig, _> = serde_path_to_error::deserialize(tracked);
    if let Some(k) = unknown.into_iter().next() {
        return Err(ConfigError::UnknownKey(k));
    }
    let cfg = parsed.map_err(|e| ConfigError::Parse {
        key: e.path().to_string(),
        message: e.inner().message().to_string(),
    })?;
    let seed = cfg.seed;
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.train.t, 2.0);
        assert_eq!(cfg.train.tau, 0.25);
        assert_eq!(cfg.train.beta, 0.15);
        assert!(cfg.train.use_pareto);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn seed_propagates() {
        let cfg = parse_config_str("seed = 9\n[train]\nseed = 3\n").unwrap();
        assert_eq!((cfg.data.seed, cfg.train.seed, cfg.flow.seed), (9, 9, 9));
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse_config_str("[train]\ntau = -1.0\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Range { key, .. } if key == "train.tau"), "{e}");
        let e = parse_config_str("[train]\nmomentum = 0.9\n").unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "train.momentum"), "{e}");
        let e = parse_config_str("momentum = 0.9\n").unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "momentum"), "{e}");
        let e = parse_config_str("[train]\nlr = \"fast\"\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Parse { key, .. } if key == "train.lr"), "{e}");
        let e = parse_config_str("[train\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { .. }));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse_config_str("seed = 4\n[flow]\nsteps = 7\n[gap.tie]\nmethod = \"averaged-input\"\n").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), cfg);
        let back: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }
}
