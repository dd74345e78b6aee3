//! Plain SGD on the joint objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::him::Mode;
use crate::loss::LossBreakdown;
use crate::model::{Model, PreparedScene};
use crate::numcore::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Scenes whose gradients are averaged per step, taken cyclically.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-2, batch_size: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_bbox")]
    pub bbox: f64,
    #[serde(rename = "L_hm")]
    pub hm: f64,
    #[serde(rename = "L_him")]
    pub him: Vec<f64>,
    pub total: f64,
}

impl StepRecord {
    fn mean(step: usize, parts: &[LossBreakdown]) -> Self {
        let n = parts.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        let stages = parts.first().map_or(0, |p| p.him.len());
        Self {
            step,
            cls: avg(|p| p.cls),
            bbox: avg(|p| p.bbox),
            hm: avg(|p| p.hm),
            him: (0..stages).map(|s| parts.iter().map(|p| p.him[s]).sum::<f64>() / n).collect(),
            total: avg(|p| p.total),
        }
    }
}

/// Runs `cfg.steps` SGD steps, reporting each step's pre-update loss.
pub fn train(
    model: &mut Model,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if cfg.steps > 0 && scenes.is_empty() {
        return Err(Error::invalid("train", "no training scenes"));
    }
    let batch = cfg.batch_size.max(1);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        model.store.zero_grad();
        let mut parts = Vec::with_capacity(batch);
        for b in 0..batch {
            let scene = &scenes[(step * batch + b) % scenes.len()];
            let mut g = Graph::new(&model.store);
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step },
                e => e,
            };
            let out = model.forward(&mut g, scene, Mode::Train).map_err(diverged)?;
            let terms = model.loss(&mut g, &out, scene).map_err(diverged)?;
            let breakdown = terms.breakdown(&g, model.cfg.loss.lambda);
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = g.backward(terms.total)?;
            model.store.accumulate(&grads);
            parts.push(breakdown);
        }
        if batch > 1 {
            model.store.scale_grads(1.0 / batch as f64);
        }
        model.store.sgd_step(cfg.lr);
        let record = StepRecord::mean(step, &parts);
        on_step(&record);
        log.push(record);
    }
    model.store.zero_grad();
    Ok(log)
}

/// Mean total loss over `scenes` (training-mode forward, no update).
pub fn dataset_loss(model: &Model, scenes: &[PreparedScene]) -> Result<f64> {
    let mut sum = 0.0;
    for s in scenes {
        sum += model.evaluate_loss(s)?.total;
    }
    Ok(sum / scenes.len().max(1) as f64)
}
