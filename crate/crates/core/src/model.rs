//! The full pipeline: shared encoder, per-agent mining, optional message
//! compression, fusion, and the detection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{voxelize, BevGrid, Encoder, VoxelConfig, VoxelSet};
use crate::error::{Error, Result};
use crate::eval::Compressor;
use crate::head::{nms, Detection, Head, HeadConfig, HeadOutput};
use crate::him::{Him, HimConfig, HimOutput, Mode};
use crate::loss::{total_loss, HimSupervision, LossBreakdown, LossConfig, LossTerms};
use crate::numcore::{Graph, ParamStore, Var};
use crate::qaff::{mean_fusion, Fused, Qaff, QaffConfig};
use crate::scenesim::{points_in_box, to_ego_frame, AgentRole, GroundTruthBox, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub voxel: VoxelConfig,
    pub him: HimConfig,
    pub qaff: QaffConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub him_enabled: bool,
    pub qaff_enabled: bool,
    /// `false` keeps only the ego agent.
    pub collab_enabled: bool,
    /// Channel bottleneck on every non-ego agent's transmitted message.
    pub compression_ratio: usize,
    pub max_agents: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            voxel: VoxelConfig::default(),
            him: HimConfig::default(),
            qaff: QaffConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            him_enabled: true,
            qaff_enabled: true,
            collab_enabled: true,
            compression_ratio: 1,
            max_agents: 4,
        }
    }
}

impl ModelConfig {
    /// Stage count actually run; mining off means a single pass.
    pub fn stages(&self) -> usize {
        if self.him_enabled {
            self.him.n_stages
        } else {
            1
        }
    }

    /// Channels of one transmitted message: features plus stage queries.
    pub fn message_channels(&self) -> usize {
        (1 + self.stages()) * self.voxel.channels
    }
}

/// One agent after the ego-frame transform and voxelization.
#[derive(Clone, Debug)]
pub struct PreparedAgent {
    pub id: u32,
    pub role: AgentRole,
    pub voxels: VoxelSet,
    /// Ground truth on the grid with at least one of this agent's points.
    pub visible: Vec<GroundTruthBox>,
}

/// Model-ready scene: ego first, everything in the ego frame.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub seed: u64,
    pub agents: Vec<PreparedAgent>,
    /// Ground truth whose center lies on the grid.
    pub gt: Vec<GroundTruthBox>,
}

pub fn prepare(scene: &Scene, voxel: &VoxelConfig, max_agents: usize) -> Result<PreparedScene> {
    let grid = voxel.grid()?;
    let local = to_ego_frame(scene)?;
    let gt: Vec<GroundTruthBox> =
        local.boxes.iter().filter(|b| grid.cell_of(b.center[0], b.center[1]).is_some()).copied().collect();
    let mut order: Vec<usize> = (0..local.agents.len()).collect();
    order.sort_by_key(|&i| (local.agents[i].role != AgentRole::Ego, local.agents[i].id));
    let agents = order
        .into_iter()
        .take(max_agents)
        .map(|i| {
            let a = &local.agents[i];
            Ok(PreparedAgent {
                id: a.id,
                role: a.role,
                voxels: voxelize(&a.points, voxel)?,
                visible: gt.iter().filter(|b| points_in_box(&a.points, b) > 0).copied().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedScene { seed: scene.seed, agents, gt })
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub him: Him,
    pub qaff: Option<Qaff>,
    pub compressor: Option<Compressor>,
    pub head: Head,
    pub grid: BevGrid,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub agent_ids: Vec<u32>,
    /// Per agent, `[C, H, W]` before compression.
    pub features: Vec<Var>,
    pub him: Vec<HimOutput>,
    pub fused: Fused,
    pub head: HeadOutput,
}

/// Detections plus the fusion weights of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub seed: u64,
    pub stage_weights: Option<Vec<f64>>,
    pub agent_weights: Option<Vec<f64>>,
    pub detections: Vec<Detection>,
}

impl Model {
    /// Builds every parameter from one seeded stream in a fixed order.
    pub fn new(cfg: &ModelConfig, init_seed: u64) -> Result<Self> {
        if cfg.max_agents == 0 {
            return Err(Error::invalid("model config", "max_agents must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let c = cfg.voxel.channels;
        let encoder = Encoder::new(&mut store, &cfg.voxel, &mut rng)?;
        let him_cfg = HimConfig { n_stages: cfg.stages(), ..cfg.him.clone() };
        let him = Him::new(&mut store, c, &him_cfg, &mut rng)?;
        let compressor = if cfg.collab_enabled && cfg.compression_ratio > 1 {
            Some(Compressor::new(&mut store, cfg.message_channels(), cfg.compression_ratio, &mut rng)?)
        } else {
            if cfg.compression_ratio == 0 || !cfg.message_channels().is_multiple_of(cfg.compression_ratio) {
                return Err(Error::invalid("compress", "ratio must divide the message channels"));
            }
            None
        };
        let qaff =
            if cfg.qaff_enabled { Some(Qaff::new(&mut store, c, cfg.stages(), &cfg.qaff, &mut rng)?) } else { None };
        let query_channels = if cfg.him_enabled { cfg.stages() * c } else { 0 };
        let head = Head::new(&mut store, 2 * c, query_channels, &cfg.head, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), grid: encoder.grid, store, encoder, him, qaff, compressor, head })
    }

    fn active_agents<'s>(&self, scene: &'s PreparedScene) -> Result<&'s [PreparedAgent]> {
        match scene.agents.first() {
            Some(a) if a.role == AgentRole::Ego => {}
            _ => return Err(Error::invalid("forward", "scene must start with its ego agent")),
        }
        let n = if self.cfg.collab_enabled { scene.agents.len().min(self.cfg.max_agents) } else { 1 };
        Ok(&scene.agents[..n])
    }

    pub fn forward(&self, g: &mut Graph, scene: &PreparedScene, mode: Mode) -> Result<ForwardOutput> {
        let agents = self.active_agents(scene)?;
        let c = self.cfg.voxel.channels;
        let n_stages = self.cfg.stages();
        // Without mining there is nothing to match, so the single stage only
        // supplies queries.
        let him_mode = if self.cfg.him_enabled { mode } else { Mode::Infer };

        let mut features = Vec::with_capacity(agents.len());
        let mut him = Vec::with_capacity(agents.len());
        for a in agents {
            let f = self.encoder.encode(g, &a.voxels)?;
            let gt = (him_mode == Mode::Train).then_some(a.visible.as_slice());
            him.push(self.him.run(g, f, gt, &self.grid, him_mode)?);
            features.push(f);
        }

        let mut shared_features = Vec::with_capacity(agents.len());
        let mut shared_queries = Vec::with_capacity(agents.len());
        for (i, (f, h)) in features.iter().zip(&him).enumerate() {
            let stages: Vec<Var> = h.stages.iter().map(|s| s.features).collect();
            match (&self.compressor, i) {
                (Some(comp), 1..) => {
                    let message = g.concat(&[*f, h.queries], 0)?;
                    let received = comp.forward(g, message)?;
                    shared_features.push(g.narrow(received, 0, 0, c)?);
                    let mut qs = Vec::with_capacity(n_stages);
                    for s in 0..n_stages {
                        qs.push(g.narrow(received, 0, (1 + s) * c, c)?);
                    }
                    shared_queries.push(qs);
                }
                _ => {
                    shared_features.push(*f);
                    shared_queries.push(stages);
                }
            }
        }

        let valid = vec![true; agents.len()];
        let fused = match &self.qaff {
            Some(q) => q.forward(g, &shared_queries, &shared_features, &valid)?,
            None => mean_fusion(g, &shared_features, &valid)?,
        };
        let input = g.concat(&[fused.out, features[0]], 0)?;
        let queries = self.cfg.him_enabled.then_some(him[0].queries);
        let head = self.head.forward(g, input, queries)?;
        Ok(ForwardOutput { agent_ids: agents.iter().map(|a| a.id).collect(), features, him, fused, head })
    }

    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, scene: &PreparedScene) -> Result<LossTerms> {
        let supervision: Vec<HimSupervision> = if self.cfg.him_enabled {
            out.him.iter().zip(&scene.agents).map(|(h, a)| HimSupervision { output: h, visible: &a.visible }).collect()
        } else {
            Vec::new()
        };
        total_loss(g, &out.head, &self.grid, &scene.gt, &supervision, &self.cfg.loss)
    }

    /// Training-mode loss of one scene without gradients.
    pub fn evaluate_loss(&self, scene: &PreparedScene) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, scene, Mode::Train)?;
        let terms = self.loss(&mut g, &out, scene)?;
        Ok(terms.breakdown(&g, self.cfg.loss.lambda))
    }

    pub fn predict(&self, scene: &PreparedScene) -> Result<ScenePrediction> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, scene, Mode::Infer)?;
        let decoded = out.head.decode(&g, &self.grid);
        let row = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        Ok(ScenePrediction {
            seed: scene.seed,
            stage_weights: row(out.fused.stage_weights),
            agent_weights: row(out.fused.agent_weights),
            detections: nms(&decoded, self.cfg.head.nms_iou),
        })
    }
}

impl ForwardOutput {
    /// Every discrete decision of the pass: selected cells, stage marks and
    /// the query assignment. Equal signatures mean the loss is smooth between
    /// the two evaluations.
    pub fn signature(&self, assignment: &[Option<usize>]) -> Vec<usize> {
        let mut sig = self.head.cells.clone();
        for h in &self.him {
            for s in &h.stages {
                sig.push(usize::MAX);
                sig.extend(s.predictions.iter().map(|p| p.cell * 8 + p.class.index()));
                sig.push(usize::MAX);
                sig.extend(s.stage_mask.data().iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(i, _)| i));
            }
        }
        sig.push(usize::MAX);
        sig.extend(assignment.iter().map(|a| a.map_or(usize::MAX - 1, |x| x)));
        sig
    }
}
