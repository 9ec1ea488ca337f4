//! Run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use lae_core::sca::ScaOptions;
use lae_core::{place_gus, GuLayout, NetworkConfig};
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, Stationary};
use crate::error::{Error, Result};
use crate::graph::{Environment, PenaltyWeights};
use crate::orchestrator::SolveConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Cells per side of the placement grid, G.
    pub grid_size: usize,
    /// Seed of the GU positions, fixed for a scenario.
    pub layout_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            grid_size: 10,
            layout_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Denoising steps, T.
    pub steps: usize,
    pub stationary: Stationary,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 15,
            stationary: Stationary::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub layout: GuLayout,
    #[serde(default)]
    pub penalty: PenaltyWeights,
    #[serde(default)]
    pub sca: ScaOptions,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solve: SolveConfig,
}

impl RunConfig {
    /// K = 2, N = 8, Nt = 2, G = 10, T = 15, M = 8, L = 100, surrogate
    /// rewards.
    pub fn desk() -> Self {
        RunConfig {
            network: NetworkConfig::desk(),
            scenario: ScenarioConfig::default(),
            layout: GuLayout::default(),
            penalty: PenaltyWeights::default(),
            sca: ScaOptions::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig {
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
            solve: SolveConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.scenario.grid_size == 0 {
            return Err(Error::setting("scenario.grid_size", "must be positive"));
        }
        if self.diffusion.steps == 0 {
            return Err(Error::setting("diffusion.steps", "must be positive"));
        }
        self.denoiser.validate()?;
        self.train.validate(self.diffusion.steps)?;
        self.solve.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// The configuration as JSON, recorded in checkpoints and hashed.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run configs serialize")
    }

    pub fn environment(&self) -> Result<Environment> {
        let gus = place_gus(&self.layout, &self.network, self.scenario.layout_seed)?;
        let mut env = Environment::new(self.network.clone(), self.scenario.grid_size, gus)?;
        env.weights = self.penalty;
        env.sca = self.sca;
        Ok(env)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let cells = self.scenario.grid_size * self.scenario.grid_size;
        NoiseSchedule::cosine(self.diffusion.steps, cells, self.network.num_aebs, self.diffusion.stationary)
    }
}
