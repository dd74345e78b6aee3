//! Deterministic synthetic multi-agent scenes with ray-cast occlusion.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rotated_bev_iou;
use crate::geometry::{normalize_angle, Box3d, RigidTransform};

pub const NUM_CLASSES: usize = 3;

const LAYOUT_ATTEMPTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ObjectClass {
    Car = 0,
    Pedestrian = 1,
    Truck = 2,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Truck];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Truck => "truck",
        }
    }

    /// Mean `(l, w, h)` in meters.
    pub fn prior_size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.5, 1.9, 1.6],
            ObjectClass::Pedestrian => [0.6, 0.6, 1.7],
            ObjectClass::Truck => [9.0, 2.6, 3.2],
        }
    }

    fn intensity(self) -> f64 {
        match self {
            ObjectClass::Car => 0.6,
            ObjectClass::Pedestrian => 0.35,
            ObjectClass::Truck => 0.8,
        }
    }
}

impl From<ObjectClass> for u8 {
    fn from(c: ObjectClass) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for ObjectClass {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        ObjectClass::from_index(v as usize).ok_or_else(|| format!("class id {v} out of range"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
}

impl GroundTruthBox {
    pub fn geometry(&self) -> Box3d {
        Box3d { center: self.center, size: self.size, yaw: self.yaw }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Ego,
    Cav,
    Infrastructure,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl From<[f64; 3]> for Pose {
    fn from([x, y, yaw]: [f64; 3]) -> Self {
        Pose { x, y, yaw }
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.yaw]
    }
}

impl Pose {
    /// Maps coordinates in this pose's local frame to the parent frame.
    pub fn transform(&self) -> RigidTransform {
        RigidTransform { rotation: self.yaw, translation: [self.x, self.y] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub id: u32,
    pub role: AgentRole,
    pub pose: Pose,
    #[serde(with = "flat_points")]
    pub points: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub agents: Vec<AgentObservation>,
    pub boxes: Vec<GroundTruthBox>,
}

mod flat_points {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(points: &[[f64; 4]], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(points.iter().flatten())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<[f64; 4]>, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        if flat.len() % 4 != 0 {
            return Err(D::Error::custom("point array length is not a multiple of 4"));
        }
        Ok(flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
    }
}

impl Scene {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Scene> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn ego(&self) -> Option<&AgentObservation> {
        self.agents.iter().find(|a| a.role == AgentRole::Ego)
    }

    /// Applies `t` to every pose, point and box.
    pub fn transformed(&self, t: &RigidTransform) -> Scene {
        let agents = self
            .agents
            .iter()
            .map(|a| {
                let [x, y] = t.apply([a.pose.x, a.pose.y]);
                AgentObservation {
                    id: a.id,
                    role: a.role,
                    pose: Pose { x, y, yaw: normalize_angle(a.pose.yaw + t.rotation) },
                    points: a
                        .points
                        .iter()
                        .map(|p| {
                            let [x, y] = t.apply([p[0], p[1]]);
                            [x, y, p[2], p[3]]
                        })
                        .collect(),
                }
            })
            .collect();
        let boxes = self
            .boxes
            .iter()
            .map(|b| {
                let g = b.geometry().transformed(t);
                GroundTruthBox { center: g.center, size: g.size, yaw: g.yaw, class: b.class }
            })
            .collect();
        Scene { seed: self.seed, agents, boxes }
    }
}

/// Re-expresses the scene in the ego frame; the ego pose becomes `(0, 0, 0)`.
pub fn to_ego_frame(scene: &Scene) -> Result<Scene> {
    let ego = scene.ego().ok_or_else(|| Error::invalid("to_ego_frame", "scene has no ego agent"))?;
    let mut out = scene.transformed(&ego.pose.transform().inverse());
    for a in &mut out.agents {
        if a.role == AgentRole::Ego {
            a.pose = Pose { x: 0.0, y: 0.0, yaw: 0.0 };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Total agents including the ego.
    pub n_agents: usize,
    /// How many of the non-ego agents are infrastructure units.
    pub n_infrastructure: usize,
    pub max_agents: usize,
    pub n_cars: usize,
    pub n_pedestrians: usize,
    pub n_trucks: usize,
    /// Share of pedestrians placed far away or behind a truck.
    pub hard_pedestrian_fraction: f64,
    pub hard_far_distance: f64,
    /// Far pedestrians sit in `[hard_far_distance, hard_far_distance + band)`.
    pub hard_far_band: f64,
    /// Annulus around the ego where ordinary objects are placed.
    pub object_radius: [f64; 2],
    /// Annulus around the ego where other agents are placed.
    pub agent_radius: [f64; 2],
    /// Every box must lie inside this ego-centered square half-extent.
    pub keep_within: f64,
    /// Surface samples per m² at 1 m range.
    pub surface_density: f64,
    pub ground_points: usize,
    pub ground_radius: f64,
    pub size_jitter: f64,
    pub vehicle_sensor_height: f64,
    pub infrastructure_sensor_height: f64,
    /// Spread of the ego's world pose.
    pub world_offset: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_agents: 3,
            n_infrastructure: 1,
            max_agents: 4,
            n_cars: 6,
            n_pedestrians: 6,
            n_trucks: 2,
            hard_pedestrian_fraction: 0.5,
            hard_far_distance: 60.0,
            hard_far_band: 10.0,
            object_radius: [4.0, 40.0],
            agent_radius: [8.0, 30.0],
            keep_within: 100.0,
            surface_density: 400.0,
            ground_points: 300,
            ground_radius: 60.0,
            size_jitter: 0.1,
            vehicle_sensor_height: 1.8,
            infrastructure_sensor_height: 5.0,
            world_offset: 50.0,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    fn validate(&self, seed: u64) -> Result<()> {
        let fail = |msg: &str| Err(Error::Placement { seed, msg: msg.to_string() });
        if self.n_agents == 0 || self.n_agents > self.max_agents {
            return fail("agent count must be in 1..=max_agents");
        }
        if self.n_infrastructure >= self.n_agents {
            return fail("infrastructure count must leave room for the ego");
        }
        if !(0.0..=1.0).contains(&self.hard_pedestrian_fraction) {
            return fail("hard pedestrian fraction must be in [0, 1]");
        }
        if self.object_radius[0] > self.object_radius[1] || self.agent_radius[0] > self.agent_radius[1] {
            return fail("radius intervals must be ordered");
        }
        Ok(())
    }
}

/// An agent's role and pose before any points are cast.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentPlacement {
    pub id: u32,
    pub role: AgentRole,
    pub pose: Pose,
}

/// Places agents and boxes for `seed`, then casts every agent's cloud.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 0;
    let (agents, boxes) = loop {
        // A dead end usually comes from an early placement; start over.
        match place(seed, cfg, &mut rng) {
            Ok(layout) => break layout,
            Err(e) if attempt + 1 >= LAYOUT_ATTEMPTS => return Err(e),
            Err(_) => attempt += 1,
        }
    };
    Ok(cast(seed, &agents, &boxes, cfg, &mut rng))
}

/// Seed of the `index`-th scene of a dataset generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

pub fn generate_dataset(base: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate_scene(scene_seed(base, i), cfg)).collect()
}

/// Casts point clouds for a fixed layout. Sampling noise comes from `seed`.
pub fn generate_from_layout(
    seed: u64,
    agents: &[AgentPlacement],
    boxes: &[GroundTruthBox],
    cfg: &SceneConfig,
) -> Result<Scene> {
    if agents.iter().filter(|a| a.role == AgentRole::Ego).count() != 1 {
        return Err(Error::Placement { seed, msg: "layout needs exactly one ego".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(cast(seed, agents, boxes, cfg, &mut rng))
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn prior_ped_half_diag() -> f64 {
    let [l, w, _] = ObjectClass::Pedestrian.prior_size();
    l.hypot(w) / 2.0
}

fn place(seed: u64, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<AgentPlacement>, Vec<GroundTruthBox>)> {
    let fail = |msg: String| Error::Placement { seed, msg };

    // Everything is laid out around an ego at the origin, then moved to a
    // random world pose.
    let mut local_agents =
        vec![AgentPlacement { id: 0, role: AgentRole::Ego, pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 } }];
    let first_infra = cfg.n_agents - cfg.n_infrastructure;
    for k in 1..cfg.n_agents {
        let role = if k >= first_infra { AgentRole::Infrastructure } else { AgentRole::Cav };
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let r = rng.gen_range(cfg.agent_radius[0]..=cfg.agent_radius[1]);
            let b = rng.gen_range(-PI..PI);
            let pose = Pose { x: r * b.cos(), y: r * b.sin(), yaw: rng.gen_range(-PI..PI) };
            let clear = local_agents.iter().all(|a| (a.pose.x - pose.x).hypot(a.pose.y - pose.y) >= 3.0);
            if clear {
                placed = Some(pose);
                break;
            }
        }
        let pose = placed.ok_or_else(|| fail(format!("could not place agent {k}")))?;
        local_agents.push(AgentPlacement { id: k as u32, role, pose });
    }

    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    let n_hard = (cfg.hard_pedestrian_fraction * cfg.n_pedestrians as f64).round() as usize;
    let jobs = std::iter::repeat_n(ObjectClass::Truck, cfg.n_trucks)
        .chain(std::iter::repeat_n(ObjectClass::Car, cfg.n_cars))
        .chain(std::iter::repeat_n(ObjectClass::Pedestrian, cfg.n_pedestrians));
    let mut ped_index = 0;
    for class in jobs {
        let hard = class == ObjectClass::Pedestrian && {
            ped_index += 1;
            ped_index > cfg.n_pedestrians - n_hard
        };
        let hard_slot = ped_index.saturating_sub(cfg.n_pedestrians - n_hard);
        let trucks: Vec<GroundTruthBox> = boxes.iter().filter(|b| b.class == ObjectClass::Truck).copied().collect();
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let prior = class.prior_size();
            let size = prior.map(|s| s * (1.0 + rng.gen_range(-cfg.size_jitter..=cfg.size_jitter)));
            let yaw = rng.gen_range(-PI..PI);
            let [cx, cy] = if hard && !trucks.is_empty() && hard_slot % 2 == 1 {
                let t = trucks[(hard_slot / 2) % trucks.len()];
                let d = t.center[0].hypot(t.center[1]).max(1e-9);
                let dir = [t.center[0] / d, t.center[1] / d];
                let half_diag = t.size[0].hypot(t.size[1]) / 2.0;
                let behind = half_diag + 0.6 + rng.gen_range(0.0..1.5);
                let lateral = rng.gen_range(-0.3..0.3);
                [t.center[0] + dir[0] * behind - dir[1] * lateral, t.center[1] + dir[1] * behind + dir[0] * lateral]
            } else if hard {
                let r = rng.gen_range(cfg.hard_far_distance..cfg.hard_far_distance + cfg.hard_far_band);
                let b = rng.gen_range(-PI..PI);
                [r * b.cos(), r * b.sin()]
            } else {
                let (r0, mut r1) = (cfg.object_radius[0], cfg.object_radius[1]);
                if class == ObjectClass::Truck && n_hard >= 2 {
                    // Leave room for a pedestrian in the truck's shadow.
                    let reach = size[0].hypot(size[1]) / 2.0 + 2.1 + prior_ped_half_diag();
                    r1 = r1.min(cfg.keep_within - reach).max(r0);
                }
                let r = rng.gen_range(r0 * r0..=r1 * r1).sqrt();
                let b = rng.gen_range(-PI..PI);
                [r * b.cos(), r * b.sin()]
            };
            let candidate = GroundTruthBox { center: [cx, cy, size[2] / 2.0], size, yaw, class };
            if fits(&candidate, &boxes, &local_agents, cfg) {
                placed = Some(candidate);
                break;
            }
        }
        let b = placed.ok_or_else(|| fail(format!("could not place a {}", class.name())))?;
        boxes.push(b);
    }

    let ego_world = Pose {
        x: rng.gen_range(-cfg.world_offset..=cfg.world_offset),
        y: rng.gen_range(-cfg.world_offset..=cfg.world_offset),
        yaw: rng.gen_range(-PI..PI),
    }
    .transform();
    let agents = local_agents
        .into_iter()
        .map(|a| {
            let [x, y] = ego_world.apply([a.pose.x, a.pose.y]);
            AgentPlacement { pose: Pose { x, y, yaw: normalize_angle(a.pose.yaw + ego_world.rotation) }, ..a }
        })
        .collect();
    let boxes = boxes
        .into_iter()
        .map(|b| {
            let g = b.geometry().transformed(&ego_world);
            GroundTruthBox {
                center: g.center.map(round_sig9),
                size: g.size.map(round_sig9),
                yaw: round_sig9(g.yaw),
                class: b.class,
            }
        })
        .collect();
    Ok((agents, boxes))
}

fn fits(candidate: &GroundTruthBox, boxes: &[GroundTruthBox], agents: &[AgentPlacement], cfg: &SceneConfig) -> bool {
    let g = candidate.geometry();
    let inside = g.corners_bev().iter().all(|c| c[0].abs() < cfg.keep_within && c[1].abs() < cfg.keep_within);
    if !inside {
        return false;
    }
    let clearance = g.size[0].hypot(g.size[1]) / 2.0 + 1.0;
    if agents.iter().any(|a| (a.pose.x - g.center[0]).hypot(a.pose.y - g.center[1]) < clearance) {
        return false;
    }
    boxes.iter().all(|b| rotated_bev_iou(&g, &b.geometry()).is_ok_and(|iou| iou <= 0.0))
}

fn sensor_origin(a: &AgentPlacement, cfg: &SceneConfig) -> [f64; 3] {
    let h = match a.role {
        AgentRole::Infrastructure => cfg.infrastructure_sensor_height,
        _ => cfg.vehicle_sensor_height,
    };
    [a.pose.x, a.pose.y, h]
}

/// True when the segment from `origin` to `target` passes through the inside
/// of any box before reaching `target`.
pub fn occluded(origin: [f64; 3], target: [f64; 3], boxes: &[Box3d]) -> bool {
    let dir = [target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]];
    boxes.iter().any(|b| match b.ray_interval(origin, dir) {
        Some((t0, t1)) => t0 < 1.0 - 1e-6 && t1 > 1e-6 && t1 - t0 > 1e-9,
        None => false,
    })
}

fn cast(
    seed: u64,
    agents: &[AgentPlacement],
    boxes: &[GroundTruthBox],
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let geoms: Vec<Box3d> = boxes.iter().map(|b| b.geometry()).collect();
    let observations = agents
        .iter()
        .map(|a| {
            let o = sensor_origin(a, cfg);
            let mut points = Vec::new();
            for (b, g) in boxes.iter().zip(&geoms) {
                let d2 = (g.center[0] - o[0]).powi(2) + (g.center[1] - o[1]).powi(2);
                let scale = cfg.surface_density / d2.max(1.0);
                for face in faces(g) {
                    let to_sensor = [o[0] - face.center[0], o[1] - face.center[1], o[2] - face.center[2]];
                    if dot(face.normal, to_sensor) <= 0.0 {
                        continue;
                    }
                    let expected = (scale * face.area).min(2000.0);
                    let mut n = expected.floor() as usize;
                    if rng.gen::<f64>() < expected.fract() {
                        n += 1;
                    }
                    for _ in 0..n {
                        let u = rng.gen_range(-0.5..0.5);
                        let v = rng.gen_range(-0.5..0.5);
                        let p = [0, 1, 2].map(|i| face.center[i] + u * face.span_u[i] + v * face.span_v[i]);
                        if occluded(o, p, &geoms) {
                            continue;
                        }
                        let intensity = b.class.intensity() + rng.gen_range(-0.05..0.05);
                        points.push([p[0], p[1], p[2], intensity].map(round_sig9));
                    }
                }
            }
            let r_min = 1.0f64;
            for _ in 0..cfg.ground_points {
                let u: f64 = rng.gen();
                let r = r_min * (cfg.ground_radius / r_min).powf(u);
                let bearing = rng.gen_range(-PI..PI);
                let p = [o[0] + r * bearing.cos(), o[1] + r * bearing.sin(), 0.0];
                let intensity = 0.1 + rng.gen_range(-0.05..0.05);
                if occluded(o, p, &geoms) {
                    continue;
                }
                points.push([p[0], p[1], p[2], intensity].map(round_sig9));
            }
            AgentObservation {
                id: a.id,
                role: a.role,
                pose: Pose { x: round_sig9(a.pose.x), y: round_sig9(a.pose.y), yaw: round_sig9(a.pose.yaw) },
                points,
            }
        })
        .collect();
    Scene { seed, agents: observations, boxes: boxes.to_vec() }
}

struct Face {
    center: [f64; 3],
    normal: [f64; 3],
    span_u: [f64; 3],
    span_v: [f64; 3],
    area: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// The four sides and the roof of a box, in world coordinates.
fn faces(b: &Box3d) -> Vec<Face> {
    let (s, c) = b.yaw.sin_cos();
    let ex = [c, s, 0.0];
    let ey = [-s, c, 0.0];
    let ez = [0.0, 0.0, 1.0];
    let [l, w, h] = b.size;
    let at = |axis: [f64; 3], half: f64| [0, 1, 2].map(|i| b.center[i] + axis[i] * half);
    let neg = |a: [f64; 3]| a.map(|x| -x);
    let scaled = |a: [f64; 3], k: f64| a.map(|x| x * k);
    vec![
        Face { center: at(ex, l / 2.0), normal: ex, span_u: scaled(ey, w), span_v: scaled(ez, h), area: w * h },
        Face { center: at(ex, -l / 2.0), normal: neg(ex), span_u: scaled(ey, w), span_v: scaled(ez, h), area: w * h },
        Face { center: at(ey, w / 2.0), normal: ey, span_u: scaled(ex, l), span_v: scaled(ez, h), area: l * h },
        Face { center: at(ey, -w / 2.0), normal: neg(ey), span_u: scaled(ex, l), span_v: scaled(ez, h), area: l * h },
        Face { center: at(ez, h / 2.0), normal: ez, span_u: scaled(ex, l), span_v: scaled(ey, w), area: l * w },
    ]
}

/// Number of `points` inside `b`, with a small tolerance for surface samples.
pub fn points_in_box(points: &[[f64; 4]], b: &GroundTruthBox) -> usize {
    let g = b.geometry();
    points.iter().filter(|p| g.contains([p[0], p[1], p[2]], 1e-6)).count()
}
