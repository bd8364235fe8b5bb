//! Experiment configuration: one TOML file with a schema version, one table
//! per module. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BirlConfig, DirlConfig, QpNashConfig};
use crate::chase::ChaseConfig;
use crate::error::{Error, Result};
use crate::irl::{DemoConfig, IrlConfig};
use crate::nash::NashConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Oracle,
    Nash,
    Irl,
    Birl,
    Dirl,
    Qp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Sup-norm stopping tolerance of Shapley iteration.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { tol: 1e-10, max_sweeps: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// States sampled for reward correlation.
    pub corr_states: usize,
    /// States sampled for policy KL.
    pub kl_states: usize,
    /// Starting states per matchup pairing and for sampled deterioration.
    pub eval_batch: usize,
    /// Rollout length of sampled evaluations.
    pub eval_horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { corr_states: 1024, kl_states: 64, eval_batch: 64, eval_horizon: 100 }
    }
}

/// Artifacts consumed by later stages. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demos: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<PathBuf>,
    /// Policies under evaluation (method A in a matchup).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_f: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_g: Option<PathBuf>,
    /// Reference policies: the KL target, or the Nash pair for sampled
    /// deterioration on games too large for the oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_f: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_g: Option<PathBuf>,
    /// Method B of a matchup.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_policy_f: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_policy_g: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub game: ChaseConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub nash: NashConfig,
    #[serde(default)]
    pub demo: DemoConfig,
    #[serde(default)]
    pub irl: IrlConfig,
    #[serde(default)]
    pub birl: BirlConfig,
    #[serde(default)]
    pub dirl: DirlConfig,
    #[serde(default)]
    pub qp: QpNashConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub inputs: InputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            algorithm: None,
            seed: None,
            out_dir: None,
            game: ChaseConfig::default(),
            oracle: OracleConfig::default(),
            nash: NashConfig::default(),
            demo: DemoConfig::default(),
            irl: IrlConfig::default(),
            birl: BirlConfig::default(),
            dirl: DirlConfig::default(),
            qp: QpNashConfig::default(),
            eval: EvalConfig::default(),
            inputs: InputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", cfg.schema_version)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Validate every module table that a run might touch.
    pub fn validate(&self) -> Result<()> {
        if self.game.grid_n < 2 || self.game.team_size == 0 || !(0.0..1.0).contains(&self.game.discount) {
            return Err(Error::Config(format!("bad game config {:?}", self.game)));
        }
        if self.oracle.tol.is_nan() || self.oracle.tol <= 0.0 || self.oracle.max_sweeps == 0 {
            return Err(Error::Config("oracle.tol and oracle.max_sweeps must be positive".into()));
        }
        let e = &self.eval;
        if e.corr_states < 2 || e.kl_states == 0 || e.eval_batch == 0 {
            return Err(Error::Config("eval sample sizes must be positive (corr_states at least 2)".into()));
        }
        self.nash.validate()?;
        self.demo.validate()?;
        self.irl.validate()?;
        self.birl.validate()?;
        self.dirl.validate()?;
        self.qp.validate()
    }
}
