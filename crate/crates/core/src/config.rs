//! Run configuration: every module's settings plus seeds and scene counts.

use serde::{Deserialize, Serialize};

use crate::encoder::VoxelConfig;
use crate::error::Result;
use crate::eval::EvalConfig;
use crate::head::HeadConfig;
use crate::him::HimConfig;
use crate::model::ModelConfig;
use crate::qaff::QaffConfig;
use crate::scenesim::SceneConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the parameter initialization stream.
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 64,
            eval_scenes: 32,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// 32×32 grid of 0.8 m cells, 8 channels, two agents, two stages.
    pub fn micro() -> Self {
        let voxel = VoxelConfig { range_xy: [-12.8, 12.8], downsample: 4, channels: 8, ..VoxelConfig::default() };
        Self {
            seed: 0,
            train_scenes: 16,
            eval_scenes: 8,
            scene: SceneConfig {
                n_agents: 2,
                n_infrastructure: 0,
                n_cars: 1,
                n_pedestrians: 1,
                n_trucks: 0,
                hard_pedestrian_fraction: 0.0,
                hard_far_distance: 8.0,
                hard_far_band: 2.0,
                object_radius: [3.0, 10.0],
                agent_radius: [4.0, 9.0],
                keep_within: 12.0,
                ground_points: 100,
                ground_radius: 15.0,
                world_offset: 20.0,
                ..SceneConfig::default()
            },
            model: ModelConfig {
                voxel,
                him: HimConfig { n_stages: 2, ..HimConfig::default() },
                qaff: QaffConfig { heads: 2, model_dim: 8 },
                head: HeadConfig { top_k: 16, heads: 2, model_dim: 8, ..HeadConfig::default() },
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig { range_xy: 12.8, ..EvalConfig::default() },
        }
    }

    /// Toy benchmark on a 40×40 grid: 16 channels and three stages, so a transmitted message
    /// has 64 channels and every compression ratio up to 64 divides it.
    pub fn toy() -> Self {
        let micro = Self::micro();
        Self {
            train_scenes: 64,
            eval_scenes: 32,
            scene: SceneConfig {
                n_agents: 3,
                n_infrastructure: 1,
                n_cars: 2,
                n_pedestrians: 3,
                n_trucks: 1,
                hard_pedestrian_fraction: 2.0 / 3.0,
                hard_far_distance: 12.0,
                hard_far_band: 2.5,
                object_radius: [3.0, 12.0],
                agent_radius: [4.0, 10.0],
                keep_within: 15.5,
                ground_points: 150,
                ground_radius: 18.0,
                ..micro.scene
            },
            model: ModelConfig {
                voxel: VoxelConfig { range_xy: [-16.0, 16.0], channels: 16, ..micro.model.voxel },
                him: HimConfig::default(),
                qaff: QaffConfig { heads: 4, model_dim: 16 },
                head: HeadConfig { top_k: 24, heads: 4, model_dim: 16, ..HeadConfig::default() },
                ..ModelConfig::default()
            },
            train: TrainConfig { steps: 1500, ..TrainConfig::default() },
            eval: EvalConfig { range_xy: 16.0, ..EvalConfig::default() },
            ..micro
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| crate::Error::invalid("config", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::Error::invalid("config", e.to_string()))
    }
}
