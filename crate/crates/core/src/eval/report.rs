use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PreparedScene, ScenePrediction};
use crate::scenesim::ObjectClass;

use super::{average_precision_frames, mean_ap, Frame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// The two reported thresholds, low then high.
    pub iou_thresholds: [f64; 2],
    /// Ego-centric half extent.
    pub range_xy: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresholds: [0.3, 0.5], range_xy: 100.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("eval config", "IoU thresholds must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap03: Option<f64>,
    pub ap05: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ReportConfig,
    pub per_class: BTreeMap<String, ClassAp>,
    pub map03: Option<f64>,
    pub map05: Option<f64>,
    pub per_scene: Vec<ScenePrediction>,
}

/// Runs the model over `scenes` (on `jobs` threads when above 1) and scores
/// the pooled detections.
pub fn evaluate(model: &Model, scenes: &[PreparedScene], cfg: &EvalConfig, jobs: usize) -> Result<MetricsReport> {
    cfg.validate()?;
    let run = || -> Result<Vec<ScenePrediction>> { scenes.par_iter().map(|s| model.predict(s)).collect() };
    let per_scene = if jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid("evaluate", e.to_string()))?
            .install(run)?
    } else {
        scenes.iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>()?
    };
    score(model.cfg.clone(), cfg, scenes, per_scene)
}

/// AP tables from already computed predictions.
pub fn score(
    model: ModelConfig,
    cfg: &EvalConfig,
    scenes: &[PreparedScene],
    per_scene: Vec<ScenePrediction>,
) -> Result<MetricsReport> {
    let frames: Vec<Frame> =
        scenes.iter().zip(&per_scene).map(|(s, p)| Frame { detections: &p.detections, ground_truth: &s.gt }).collect();
    let mut per_class = BTreeMap::new();
    let mut low = Vec::new();
    let mut high = Vec::new();
    for class in ObjectClass::ALL {
        let ap03 = average_precision_frames(&frames, cfg.iou_thresholds[0], class, cfg.range_xy)?;
        let ap05 = average_precision_frames(&frames, cfg.iou_thresholds[1], class, cfg.range_xy)?;
        low.push(ap03);
        high.push(ap05);
        per_class.insert(class.name().to_string(), ClassAp { ap03, ap05 });
    }
    Ok(MetricsReport {
        config: ReportConfig { model, eval: cfg.clone() },
        per_class,
        map03: mean_ap(&low),
        map05: mean_ap(&high),
        per_scene,
    })
}
