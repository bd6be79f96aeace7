//! JSON configuration schemas and model assembly.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lov_core::calibrate::CalibrationConfig;
use lov_core::lsmc::LsmcOptions;
use lov_core::model::GammaRule;
use lov_core::sensitivity::{Mlp, MlpShape};
use lov_core::{CorridorPartition, LocalVolSurface, LovModel, MarketEnvironment, SensitivitySpec, SimConfig, VarianceMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    #[serde(rename = "M")]
    pub m: usize,
    /// Nodes span `x0 (1 -/+ band_multiplier sigma_ref sqrt(T))`.
    pub band_multiplier: f64,
    /// Defaults to the local vol at `(0, x0)`.
    pub sigma_ref: Option<f64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { m: 63, band_multiplier: 2.0, sigma_ref: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub output_scale: f64,
    pub output_shift: bool,
    pub seed: u64,
    /// Start from this checkpoint instead of a fresh initialisation.
    pub checkpoint: Option<PathBuf>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], output_scale: 1.0, output_shift: false, seed: 0, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum SpecConfig {
    #[default]
    Zero,
    OneFactorCorridor {
        beta: f64,
        lower: f64,
        #[serde(default)]
        upper: Option<f64>,
        #[serde(default)]
        multiplicative: bool,
    },
    /// `scale` defaults to a quarter of the minimum local variance.
    Tanh {
        #[serde(default)]
        scale: Option<f64>,
        alpha: f64,
    },
    EmaLog {
        beta: f64,
    },
    Neural {
        #[serde(flatten)]
        network: NetworkConfig,
    },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: VarianceMode,
    pub kappa: f64,
    pub clamp: [f64; 2],
    pub spec: SpecConfig,
    /// Used when no `--surface` flag is given.
    pub surface_file: Option<PathBuf>,
    pub partition: PartitionConfig,
    pub gamma_rule: GammaRule,
    pub uncentered: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: VarianceMode::Additive,
            kappa: 12.0,
            clamp: [lov_core::localvol::LOCAL_VARIANCE_FLOOR, lov_core::localvol::LOCAL_VARIANCE_CAP],
            spec: SpecConfig::Zero,
            surface_file: None,
            partition: PartitionConfig::default(),
            gamma_rule: GammaRule::DiscreteMass,
            uncentered: false,
        }
    }
}

impl ModelConfig {
    /// Binds the configuration to a surface and market over `[0, horizon]`.
    pub fn build(&self, surface: &LocalVolSurface, env: &MarketEnvironment, horizon: f64) -> Result<LovModel> {
        let sigma_ref = self.partition.sigma_ref.unwrap_or_else(|| surface.vol(0.0, env.spot));
        let partition = CorridorPartition::build(env.spot, sigma_ref * self.partition.band_multiplier / 2.0, horizon, self.partition.m)
            .context("building the corridor partition")?;
        let spec = match &self.spec {
            SpecConfig::Zero => SensitivitySpec::Zero,
            SpecConfig::OneFactorCorridor { beta, lower, upper, multiplicative } => {
                SensitivitySpec::one_factor(*beta, *lower, *upper, *multiplicative)?
            }
            SpecConfig::Tanh { scale: Some(s), alpha } => SensitivitySpec::tanh(*s, *alpha, surface, horizon)?,
            SpecConfig::Tanh { scale: None, alpha } => SensitivitySpec::tanh_bounded(*alpha, surface, horizon)?,
            SpecConfig::EmaLog { beta } => SensitivitySpec::EmaLog { beta: *beta },
            SpecConfig::Neural { network } => SensitivitySpec::Neural(network.build(horizon, env.spot)?),
        };
        let model = LovModel::new(surface.clone(), partition, spec, self.mode, self.kappa)?
            .with_clamp(self.clamp[0], self.clamp[1])?
            .with_gamma_rule(self.gamma_rule)
            .with_uncentered(self.uncentered);
        Ok(model)
    }
}

impl NetworkConfig {
    pub fn shape(&self, horizon: f64, spot: f64) -> MlpShape {
        let mut sizes = vec![3];
        sizes.extend(&self.hidden);
        sizes.push(1);
        MlpShape { sizes, horizon, spot, output_scale: self.output_scale, output_shift: self.output_shift, seed: self.seed }
    }

    pub fn build(&self, horizon: f64, spot: f64) -> Result<Mlp> {
        match &self.checkpoint {
            Some(path) => checkpoint::load(path),
            None => Ok(Mlp::init(self.shape(horizon, spot))?),
        }
    }
}

/// `simulate` and `price` configuration: the simulation grid, market and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_multiplier: f64,
    pub env: MarketEnvironment,
    #[serde(default)]
    pub model: ModelConfig,
    /// Also write every grid point (`path_id,step,t,X,sigma`).
    #[serde(default)]
    pub dump_paths: bool,
    #[serde(default)]
    pub lsmc: LsmcOptions,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_bandwidth() -> f64 {
    1.5
}

impl SimulateConfig {
    pub fn sim(&self) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            steps: self.steps,
            paths: self.paths,
            seed: self.seed,
            bandwidth_multiplier: self.bandwidth_multiplier,
            record_tape: false,
        }
    }
}

/// `calibrate` and `report` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub calibration: CalibrationConfig,
    pub max_rel_spread: f64,
    /// Write `checkpoints/theta_<epoch>.bin` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig { spec: SpecConfig::Neural { network: NetworkConfig::default() }, ..ModelConfig::default() },
            calibration: CalibrationConfig::default(),
            max_rel_spread: 0.25,
            checkpoint_every: 100,
        }
    }
}

/// Reads a JSON config; schema problems are reported with the file name.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("config {} does not match the schema", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_simulate_config() {
        let c: SimulateConfig = serde_json::from_str(
            r#"{"horizon": 0.5, "steps": 10, "paths": 8, "env": {"spot": 100, "rate": 0.01, "dividend_yield": 0, "valuation_date": ""},
                "model": {"spec": {"kind": "tanh", "alpha": 1.0}, "partition": {"M": 5}}}"#,
        )
        .unwrap();
        assert_eq!(c.model.partition.m, 5);
        assert_eq!(c.bandwidth_multiplier, 1.5);
        let s = LocalVolSurface::constant(0.2).unwrap();
        let m = c.model.build(&s, &c.env, c.horizon).unwrap();
        assert_eq!(m.spec, SensitivitySpec::Tanh { scale: 0.25 * (0.2 * 0.2), alpha: 1.0 });
        assert_eq!(m.partition.len(), 5);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"kapa": 1}"#).is_err());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"spec": {"kind": "tanh", "alpha": 1, "beta": 2}}"#).is_err());
    }

    #[test]
    fn neural_spec_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"spec": {"kind": "neural", "output_scale": 0.1, "seed": 4}}"#).unwrap();
        let s = LocalVolSurface::constant(0.2).unwrap();
        let env = MarketEnvironment::new(100.0, 0.0, 0.0).unwrap();
        let m = c.build(&s, &env, 1.0).unwrap();
        assert_eq!(m.spec.n_params(), 4481);
    }

    #[test]
    fn calibrate_config_round_trips() {
        let c = CalibrateConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<CalibrateConfig>(&text).unwrap(), c);
    }
}
