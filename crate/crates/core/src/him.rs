//! Hard instance mining: mask what earlier stages found, re-detect on the
//! remainder, and stack the stage features into queries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assign::hungarian;
use crate::encoder::BevGrid;
use crate::error::{Error, Result};
use crate::eval::rotated_bev_iou;
use crate::geometry::Box3d;
use crate::numcore::nn::Conv;
use crate::numcore::{max_pool_peaks, sigmoid, Graph, ParamStore, Tensor, Var};
use crate::scenesim::{GroundTruthBox, ObjectClass, NUM_CLASSES};

/// Logit bias that starts every heatmap near σ = 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HimConfig {
    pub n_stages: usize,
    pub tau: f64,
    pub gamma: f64,
    pub tau_iou: f64,
    pub peak_kernel: usize,
    /// `true`: τ_s = τ·γ^(−s). `false`: τ_s = τ·γ^s.
    pub decay: bool,
}

impl Default for HimConfig {
    fn default() -> Self {
        Self { n_stages: 3, tau: 0.4, gamma: 2.0, tau_iou: 0.5, peak_kernel: 3, decay: true }
    }
}

impl HimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::invalid("him config", "n_stages must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid("him config", "tau must be in (0, 1)"));
        }
        if self.gamma < 1.0 {
            return Err(Error::invalid("him config", "gamma must be at least 1"));
        }
        if self.peak_kernel.is_multiple_of(2) {
            return Err(Error::invalid("him config", "peak_kernel must be odd"));
        }
        Ok(())
    }

    pub fn threshold(&self, stage: usize) -> f64 {
        let e = if self.decay { -(stage as f64) } else { stage as f64 };
        self.tau * self.gamma.powf(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A stage detection: a heatmap peak with a class-prior box at the cell
/// center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub cell: usize,
    pub class: ObjectClass,
    pub score: f64,
    pub bbox: Box3d,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    /// Mask entering the stage (`M_acc` before the update).
    pub incoming_mask: Tensor,
    /// `F_orig ⊙ (1 − M_spatial)`.
    pub masked_input: Tensor,
    pub features: Var,
    pub heatmap: Var,
    pub predictions: Vec<Prediction>,
    pub stage_mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct HimOutput {
    pub stages: Vec<StageOutput>,
    /// `[n_S·C, H, W]`.
    pub queries: Var,
    pub final_mask: Tensor,
}

/// Stage-specific extractors Ψ_s and the shared detector Ω.
#[derive(Clone, Debug)]
pub struct Him {
    pub extractors: Vec<Conv>,
    pub detector: Conv,
    pub cfg: HimConfig,
}

impl Him {
    pub fn new(store: &mut ParamStore, channels: usize, cfg: &HimConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let extractors = (0..cfg.n_stages)
            .map(|s| Conv::new(store, &format!("him.psi{s}"), channels, channels, 3, true, rng))
            .collect();
        let detector = Conv::new(store, "him.omega", channels, NUM_CLASSES, 1, true, rng);
        let bias = detector.bias.expect("omega has a bias");
        store.get_mut(bias).tensor = Tensor::full(&[NUM_CLASSES], HEATMAP_PRIOR_BIAS);
        Ok(Self { extractors, detector, cfg: cfg.clone() })
    }

    /// One stage's Ψ_s then Ω on an already-masked input.
    pub fn stage(&self, g: &mut Graph, s: usize, masked: Var) -> Result<(Var, Var)> {
        let f = self.extractors[s].forward(g, masked)?;
        let f = g.silu(f);
        let h = self.detector.forward(g, f)?;
        Ok((f, h))
    }

    /// Runs every stage on `f: [C, H, W]`. Train mode marks matched
    /// predictions against `gt`; infer mode marks thresholded peaks.
    pub fn run(
        &self,
        g: &mut Graph,
        f: Var,
        gt: Option<&[GroundTruthBox]>,
        grid: &BevGrid,
        mode: Mode,
    ) -> Result<HimOutput> {
        if mode == Mode::Train && gt.is_none() {
            return Err(Error::MissingGroundTruth);
        }
        let shape = g.shape(f).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut acc = Tensor::zeros(&[NUM_CLASSES, h, w]);
        let mut stages = Vec::with_capacity(self.cfg.n_stages);
        for s in 0..self.cfg.n_stages {
            let spatial = flatten(&acc);
            let keep = Tensor::from_fn(&[c, h, w], |i| 1.0 - spatial.data()[i % (h * w)]);
            let masked = g.mul_const(f, &keep)?;
            let (features, heatmap) = self.stage(g, s, masked)?;
            let logits = g.value(heatmap).clone();
            let predictions = stage_predictions(&logits, &spatial, self.cfg.threshold(s), self.cfg.peak_kernel, grid)?;
            let mut stage_mask = match mode {
                Mode::Train => match_predictions(&predictions, gt.unwrap_or(&[]), self.cfg.tau_iou, h, w)?,
                Mode::Infer => filter(&logits, s, &self.cfg)?,
            };
            for (i, m) in stage_mask.data_mut().iter_mut().enumerate() {
                if spatial.data()[i % (h * w)] > 0.0 {
                    *m = 0.0;
                }
            }
            let incoming = acc.clone();
            acc = acc.zip_map(&stage_mask, f64::max)?;
            stages.push(StageOutput {
                incoming_mask: incoming,
                masked_input: g.value(masked).clone(),
                features,
                heatmap,
                predictions,
                stage_mask,
            });
        }
        let feats: Vec<Var> = stages.iter().map(|st| st.features).collect();
        let queries = g.concat(&feats, 0)?;
        Ok(HimOutput { stages, queries, final_mask: acc })
    }
}

/// `M_spatial[h, w] = max_k M[k, h, w]` as an `[H·W]` vector.
pub fn flatten(mask: &Tensor) -> Tensor {
    let (k, hw) = (mask.shape()[0], mask.len() / mask.shape()[0]);
    Tensor::from_fn(&[hw], |i| (0..k).map(|c| mask.data()[c * hw + i]).fold(0.0, f64::max))
}

/// `𝓣_s`: local peaks whose σ exceeds the stage threshold.
pub fn filter(logits: &Tensor, stage: usize, cfg: &HimConfig) -> Result<Tensor> {
    let peaks = max_pool_peaks(logits, cfg.peak_kernel)?;
    let tau = cfg.threshold(stage);
    peaks.zip_map(logits, |p, l| if p > 0.0 && sigmoid(l) > tau { 1.0 } else { 0.0 })
}

/// Peaks above `tau` outside the spatial mask, in class-major, row-major
/// order.
pub fn stage_predictions(
    logits: &Tensor,
    spatial: &Tensor,
    tau: f64,
    kernel: usize,
    grid: &BevGrid,
) -> Result<Vec<Prediction>> {
    let peaks = max_pool_peaks(logits, kernel)?;
    let hw = grid.cells();
    let mut out = Vec::new();
    for (i, (&p, &l)) in peaks.data().iter().zip(logits.data()).enumerate() {
        let (k, cell) = (i / hw, i % hw);
        let score = sigmoid(l);
        if p > 0.0 && score > tau && spatial.data()[cell] == 0.0 {
            let class = ObjectClass::from_index(k).expect("class plane");
            let [x, y] = grid.cell_center(cell);
            let size = class.prior_size();
            out.push(Prediction { cell, class, score, bbox: Box3d { center: [x, y, size[2] / 2.0], size, yaw: 0.0 } });
        }
    }
    Ok(out)
}

/// Hungarian cost between a scored prediction and a ground-truth center.
pub fn match_cost(score: f64, pred: [f64; 3], gt: [f64; 3]) -> f64 {
    (1.0 - score) + 0.25 * ((pred[0] - gt[0]).abs() + (pred[1] - gt[1]).abs())
}

/// Per class, assigns predictions to same-class ground truth and marks the
/// prediction cell of every pair whose BEV IoU exceeds `tau_iou`. The
/// prediction box borrows the ground-truth yaw, since Ω predicts no heading.
pub fn match_predictions(
    predictions: &[Prediction],
    gt: &[GroundTruthBox],
    tau_iou: f64,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let mut mask = Tensor::zeros(&[NUM_CLASSES, h, w]);
    for class in ObjectClass::ALL {
        let preds: Vec<&Prediction> = predictions.iter().filter(|p| p.class == class).collect();
        let gts: Vec<&GroundTruthBox> = gt.iter().filter(|b| b.class == class).collect();
        if preds.is_empty() || gts.is_empty() {
            continue;
        }
        let costs: Vec<f64> =
            preds.iter().flat_map(|p| gts.iter().map(move |b| match_cost(p.score, p.bbox.center, b.center))).collect();
        for (pi, gi) in hungarian(&costs, preds.len(), gts.len())?.into_iter().enumerate() {
            let Some(gi) = gi else { continue };
            let p = preds[pi];
            let aligned = Box3d { yaw: gts[gi].yaw, ..p.bbox };
            let iou = rotated_bev_iou(&aligned, &gts[gi].geometry()).unwrap_or(0.0);
            if iou > tau_iou {
                mask.data_mut()[class.index() * h * w + p.cell] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// Whether `mask` already holds a mark of the box's class on its center cell
/// or anywhere inside its BEV footprint.
pub fn is_claimed(b: &GroundTruthBox, mask: &Tensor, grid: &BevGrid) -> bool {
    let hw = grid.cells();
    let plane = &mask.data()[b.class.index() * hw..(b.class.index() + 1) * hw];
    if let Some(c) = grid.cell_of(b.center[0], b.center[1]) {
        if plane[c] > 0.0 {
            return true;
        }
    }
    let geom = b.geometry();
    plane.iter().enumerate().any(|(cell, &m)| {
        if m == 0.0 {
            return false;
        }
        let [x, y] = grid.cell_center(cell);
        geom.contains_bev(x, y)
    })
}

/// One class plane of a `[K, H, W]` logit map as a binary PGM: header
/// `P5 <W> <H> 255`, then `round(255·σ)` per cell in row-major order.
pub fn heatmap_pgm(logits: &Tensor, class: usize) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 3 || class >= s[0] {
        return Err(Error::invalid("heatmap_pgm", format!("class {class} of map {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    out.extend(
        logits.data()[class * h * w..(class + 1) * h * w]
            .iter()
            .map(|&l| (255.0 * crate::numcore::ops::sigmoid(l)).round() as u8),
    );
    Ok(out)
}
