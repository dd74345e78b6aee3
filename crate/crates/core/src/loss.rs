//! Joint objective: focal classification over decoder queries, L1 box
//! regression, Gaussian focal heatmap loss, and per-stage mining losses.

use serde::{Deserialize, Serialize};

use crate::assign::hungarian;
use crate::encoder::BevGrid;
use crate::error::{Error, Result};
use crate::head::{decode_one, HeadOutput, BOX_PARAMS};
use crate::him::{is_claimed, match_cost, HimOutput};
use crate::numcore::{sigmoid, Graph, Tensor, Var};
use crate::scenesim::{GroundTruthBox, NUM_CLASSES};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weights of classification, box, heatmap and summed mining losses.
    pub lambda: [f64; 4],
    pub focal_alpha: f64,
    pub focal_gamma: i32,
    pub min_overlap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: [1.0, 2.0, 1.0, 0.5], focal_alpha: 0.25, focal_gamma: 2, min_overlap: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bbox: f64,
    pub hm: f64,
    pub him: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `λ₁·cls + λ₂·bbox + λ₃·hm + λ₄·Σ him`.
    pub fn combine(lambda: [f64; 4], cls: f64, bbox: f64, hm: f64, him: Vec<f64>) -> Self {
        let total = lambda[0] * cls + lambda[1] * bbox + lambda[2] * hm + lambda[3] * him.iter().sum::<f64>();
        Self { cls, bbox, hm, him, total }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary focal loss of one probability.
pub fn focal_loss(p: f64, target: bool, alpha: f64, gamma: i32) -> f64 {
    let p = clamp_prob(p);
    if target {
        -alpha * (1.0 - p).powi(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powi(gamma) * (1.0 - p).ln()
    }
}

/// Mean absolute difference over all matched pairs and parameters.
pub fn l1_box_loss(pred: &[[f64; BOX_PARAMS]], target: &[[f64; BOX_PARAMS]]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred.iter().zip(target).flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs())).sum();
    sum / (pred.len() * BOX_PARAMS) as f64
}

/// Largest center displacement (in cells) keeping IoU ≥ `min_overlap` for
/// an `h × w` footprint, by the usual three-case quadratic bound.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let root = |a: f64, b: f64, c: f64| (b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / 2.0;
    let r1 = root(1.0, h + w, w * h * (1.0 - o) / (1.0 + o));
    let r2 = root(4.0, 2.0 * (h + w), (1.0 - o) * w * h);
    let r3 = root(4.0 * o, -2.0 * o * (h + w), (o - 1.0) * w * h);
    r1.min(r2).min(r3)
}

/// Integer splat radius (at least one cell) for a box on `grid`.
pub fn splat_radius(b: &GroundTruthBox, grid: &BevGrid, min_overlap: f64) -> usize {
    let r = gaussian_radius(b.size[0] / grid.cell_y, b.size[1] / grid.cell_x, min_overlap);
    (r.floor() as usize).max(1)
}

fn splat(target: &mut Tensor, b: &GroundTruthBox, grid: &BevGrid, min_overlap: f64) {
    let Some(center) = grid.cell_of(b.center[0], b.center[1]) else {
        return;
    };
    let (h, w) = (grid.height as isize, grid.width as isize);
    let r = splat_radius(b, grid, min_overlap) as isize;
    let sigma = (2 * r + 1) as f64 / 6.0;
    let (cy, cx) = ((center / grid.width) as isize, (center % grid.width) as isize);
    let plane = b.class.index() * grid.cells();
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (cy + dy, cx + dx);
            if y < 0 || x < 0 || y >= h || x >= w {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let slot = &mut target.data_mut()[plane + (y * w + x) as usize];
            *slot = slot.max(v);
        }
    }
}

/// `[K, H, W]` max-combined Gaussian splats, exactly 1 at each center cell.
pub fn gaussian_heatmap_target(boxes: &[GroundTruthBox], grid: &BevGrid, min_overlap: f64) -> Tensor {
    let mut t = Tensor::zeros(&[NUM_CLASSES, grid.height, grid.width]);
    for b in boxes {
        splat(&mut t, b, grid, min_overlap);
    }
    t
}

/// Penalty-reduced focal loss of probabilities against a Gaussian target,
/// normalized by the number of target-1 cells (at least 1).
pub fn gaussian_focal_loss(pred: &Tensor, target: &Tensor) -> f64 {
    let mut sum = 0.0;
    let mut positives = 0usize;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = clamp_prob(p);
        if t == 1.0 {
            positives += 1;
            sum -= (1.0 - p).powi(2) * p.ln();
        } else {
            sum -= (1.0 - t).powi(4) * p.powi(2) * (1.0 - p).ln();
        }
    }
    sum / positives.max(1) as f64
}

/// Stage target: only ground truth not yet claimed by `incoming`, with
/// already-masked cells zeroed.
pub fn him_stage_target(gt: &[GroundTruthBox], incoming: &Tensor, grid: &BevGrid, min_overlap: f64) -> Tensor {
    let open: Vec<GroundTruthBox> = gt.iter().filter(|b| !is_claimed(b, incoming, grid)).copied().collect();
    let mut t = gaussian_heatmap_target(&open, grid, min_overlap);
    for (v, &m) in t.data_mut().iter_mut().zip(incoming.data()) {
        if m > 0.0 {
            *v = 0.0;
        }
    }
    t
}

/// Graph form of [`gaussian_focal_loss`] on logits.
pub fn gaussian_focal_graph(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    let positives = target.data().iter().filter(|&&t| t == 1.0).count().max(1);
    let pos_mask = target.map(|t| if t == 1.0 { 1.0 } else { 0.0 });
    let neg_weight = target.map(|t| if t == 1.0 { 0.0 } else { (1.0 - t).powi(4) });
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = g.affine(p, -1.0, 1.0);
    let log_p = g.log(p);
    let log_q = g.log(q);
    let q2 = g.powi(q, 2);
    let p2 = g.powi(p, 2);
    let pos = g.mul(q2, log_p)?;
    let pos = g.mul_const(pos, &pos_mask)?;
    let neg = g.mul(p2, log_q)?;
    let neg = g.mul_const(neg, &neg_weight)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / positives as f64))
}

/// Summed focal loss of logits against 0/1 targets of the same shape.
pub fn focal_graph(g: &mut Graph, logits: Var, target: &Tensor, alpha: f64, gamma: i32) -> Result<Var> {
    let pos_w = target.map(|t| alpha * t);
    let neg_w = target.map(|t| (1.0 - alpha) * (1.0 - t));
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = g.affine(p, -1.0, 1.0);
    let log_p = g.log(p);
    let log_q = g.log(q);
    let qg = g.powi(q, gamma);
    let pg = g.powi(p, gamma);
    let pos = g.mul(qg, log_p)?;
    let pos = g.mul_const(pos, &pos_w)?;
    let neg = g.mul(pg, log_q)?;
    let neg = g.mul_const(neg, &neg_w)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0))
}

/// Regression target of `b` for a query at `cell`.
pub fn box_target(b: &GroundTruthBox, cell: usize, grid: &BevGrid) -> [f64; BOX_PARAMS] {
    let [cx, cy] = grid.cell_center(cell);
    [
        (b.center[0] - cx) / grid.cell_x,
        (b.center[1] - cy) / grid.cell_y,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Hungarian assignment of decoder queries to ground truth: per query, the
/// matched gt index.
pub fn assign_queries(
    head: &HeadOutput,
    g: &Graph,
    gt: &[GroundTruthBox],
    grid: &BevGrid,
) -> Result<Vec<Option<usize>>> {
    let values = head.branch_values(g);
    let costs: Vec<f64> = head
        .cells
        .iter()
        .zip(&values)
        .flat_map(|(&cell, v)| {
            let center = decode_one(cell, v, grid).center;
            gt.iter().map(move |b| match_cost(sigmoid(v.class_logits[b.class.index()]), center, b.center))
        })
        .collect();
    hungarian(&costs, head.cells.len(), gt.len())
}

/// Loss variables of one scene.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub bbox: Var,
    pub hm: Var,
    pub him: Vec<Var>,
    pub total: Var,
    pub assignment: Vec<Option<usize>>,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph, lambda: [f64; 4]) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        let mut b = LossBreakdown::combine(
            lambda,
            v(self.cls),
            v(self.bbox),
            v(self.hm),
            self.him.iter().map(|&h| v(h)).collect(),
        );
        b.total = v(self.total);
        b
    }
}

/// Mining supervision for one agent: its run and the boxes it can see.
pub struct HimSupervision<'a> {
    pub output: &'a HimOutput,
    pub visible: &'a [GroundTruthBox],
}

/// Builds the weighted objective. `gt` must already be restricted to the
/// grid; mining losses are averaged over the supervised agents.
pub fn total_loss(
    g: &mut Graph,
    head: &HeadOutput,
    grid: &BevGrid,
    gt: &[GroundTruthBox],
    him: &[HimSupervision],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let k = head.cells.len();
    let assignment = assign_queries(head, g, gt, grid)?;
    let matched: Vec<(usize, usize)> = assignment.iter().enumerate().filter_map(|(q, a)| a.map(|b| (q, b))).collect();

    let cls_target = {
        let mut t = Tensor::zeros(&[k, NUM_CLASSES]);
        for &(q, b) in &matched {
            t.data_mut()[q * NUM_CLASSES + gt[b].class.index()] = 1.0;
        }
        t
    };
    let cls = focal_graph(g, head.class_logits, &cls_target, cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = g.scale(cls, 1.0 / matched.len().max(1) as f64);

    let bbox = if matched.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let params = g.concat(&[head.offset, head.height, head.dims, head.rotation], 1)?;
        let rows: Vec<usize> = matched.iter().map(|&(q, _)| q).collect();
        let picked = g.index_rows(params, &rows)?;
        let target: Vec<f64> = matched.iter().flat_map(|&(q, b)| box_target(&gt[b], head.cells[q], grid)).collect();
        let target = g.constant(Tensor::new(&[matched.len(), BOX_PARAMS], target)?);
        let diff = g.sub(picked, target)?;
        let diff = g.abs(diff);
        g.mean(diff)
    };

    let hm_target = gaussian_heatmap_target(gt, grid, cfg.min_overlap);
    let hm = gaussian_focal_graph(g, head.heatmap, &hm_target)?;

    let n_stages = him.first().map_or(0, |h| h.output.stages.len());
    if him.iter().any(|h| h.output.stages.len() != n_stages) {
        return Err(Error::invalid("total loss", "agents disagree on the number of stages"));
    }
    let mut him_terms = Vec::with_capacity(n_stages);
    for s in 0..n_stages {
        let mut acc: Option<Var> = None;
        for sup in him {
            let stage = &sup.output.stages[s];
            let target = him_stage_target(sup.visible, &stage.incoming_mask, grid, cfg.min_overlap);
            let l = gaussian_focal_graph(g, stage.heatmap, &target)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let sum = acc.expect("at least one agent");
        him_terms.push(g.scale(sum, 1.0 / him.len() as f64));
    }

    let lambda = cfg.lambda;
    let mut total = g.scale(cls, lambda[0]);
    for (term, w) in [(bbox, lambda[1]), (hm, lambda[2])] {
        let t = g.scale(term, w);
        total = g.add(total, t)?;
    }
    for &h in &him_terms {
        let t = g.scale(h, lambda[3]);
        total = g.add(total, t)?;
    }
    Ok(LossTerms { cls, bbox, hm, him: him_terms, total, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamStore;
    use crate::scenesim::ObjectClass;

    fn grid() -> BevGrid {
        BevGrid { height: 16, width: 16, cell_x: 0.8, cell_y: 0.8, origin: [-6.4, -6.4] }
    }

    fn gt(class: ObjectClass, x: f64, y: f64) -> GroundTruthBox {
        let size = class.prior_size();
        GroundTruthBox { center: [x, y, size[2] / 2.0], size, yaw: 0.3, class }
    }

    #[test]
    fn focal_examples() {
        assert!(focal_loss(1.0 - 1e-7, true, 0.25, 2) < 1e-15);
        let half = focal_loss(0.5, true, 0.25, 2);
        assert!((half - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((half - 0.04332).abs() < 1e-5);
        assert!(focal_loss(0.9, true, 0.25, 2) < half);
        assert!(focal_loss(0.0, false, 0.25, 2).is_finite());
        assert!(focal_loss(1.0, true, 0.25, 2).is_finite());
    }

    #[test]
    fn l1_examples() {
        let a = [[0.5; BOX_PARAMS]];
        assert_eq!(l1_box_loss(&a, &a), 0.0);
        let mut b = a;
        b[0][3] += 1.0;
        assert_eq!(l1_box_loss(&a, &b), 1.0 / 8.0);
        assert_eq!(l1_box_loss(&[], &[]), 0.0);
    }

    #[test]
    fn target_peaks_at_center_cell() {
        let grid = grid();
        let b = gt(ObjectClass::Car, 1.0, -2.0);
        let t = gaussian_heatmap_target(&[b], &grid, 0.1);
        let cell = grid.cell_of(1.0, -2.0).unwrap();
        assert_eq!(t.data()[cell], 1.0);
        assert_eq!(t.max_value(), 1.0);
        assert_eq!(t.data().iter().filter(|&&v| v == 1.0).count(), 1);
        let twice = gaussian_heatmap_target(&[b, b], &grid, 0.1);
        assert_eq!(t, twice);
    }

    #[test]
    fn pedestrian_radius_not_larger_than_truck() {
        let grid = grid();
        let p = splat_radius(&gt(ObjectClass::Pedestrian, 0.0, 0.0), &grid, 0.1);
        let t = splat_radius(&gt(ObjectClass::Truck, 0.0, 0.0), &grid, 0.1);
        assert_eq!(p, 1);
        assert!(p <= t);
        let raw_p = gaussian_radius(0.75, 0.75, 0.1);
        let raw_t = gaussian_radius(11.25, 3.25, 0.1);
        assert!(raw_p < raw_t);
    }

    #[test]
    fn gaussian_focal_hand_case() {
        let pred = Tensor::new(&[1, 2, 2], vec![0.8, 0.3, 0.1, 0.6]).unwrap();
        let target = Tensor::new(&[1, 2, 2], vec![1.0, 0.5, 0.0, 0.2]).unwrap();
        let expected = -(0.2f64.powi(2) * 0.8f64.ln()
            + 0.5f64.powi(4) * 0.09 * 0.7f64.ln()
            + 0.01 * 0.9f64.ln()
            + 0.8f64.powi(4) * 0.36 * 0.4f64.ln());
        assert!((gaussian_focal_loss(&pred, &target) - expected).abs() < 1e-12);

        let logits = pred.map(|p| (p / (1.0 - p)).ln());
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(logits);
        let l = gaussian_focal_graph(&mut g, x, &target).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_heatmap_has_small_loss() {
        let grid = grid();
        let t = gaussian_heatmap_target(&[gt(ObjectClass::Car, 0.0, 0.0)], &grid, 0.1);
        let pred = t.map(|v| v.clamp(1e-6, 1.0 - 1e-6));
        // Shoulder cells keep a small penalty-reduced term even at p = t.
        assert!(gaussian_focal_loss(&pred, &t) < 1e-2);
        let zero = Tensor::zeros(&[NUM_CLASSES, 16, 16]);
        assert!(gaussian_focal_loss(&zero.map(|_| 1e-6), &zero) < 1e-9);
    }

    #[test]
    fn stage_target_drops_claimed_boxes() {
        let grid = grid();
        let a = gt(ObjectClass::Car, -3.0, -3.0);
        let b = gt(ObjectClass::Pedestrian, 3.0, 3.0);
        let empty = Tensor::zeros(&[NUM_CLASSES, 16, 16]);
        assert_eq!(him_stage_target(&[a, b], &empty, &grid, 0.1), gaussian_heatmap_target(&[a, b], &grid, 0.1));
        let mut mask = empty.clone();
        let cell = grid.cell_of(-3.0, -3.0).unwrap();
        mask.data_mut()[cell] = 1.0;
        let got = him_stage_target(&[a, b], &mask, &grid, 0.1);
        assert_eq!(got, gaussian_heatmap_target(&[b], &grid, 0.1));
    }

    #[test]
    fn breakdown_is_linear_in_lambda() {
        let a = LossBreakdown::combine([1.0, 2.0, 1.0, 0.5], 0.3, 0.2, 0.7, vec![0.1, 0.4]);
        let b = LossBreakdown::combine([1.0, 4.0, 1.0, 0.5], 0.3, 0.2, 0.7, vec![0.1, 0.4]);
        assert!((b.total - a.total - 2.0 * 0.2).abs() < 1e-12);
        assert!((a.total - (0.3 + 0.4 + 0.7 + 0.25)).abs() < 1e-12);
    }
}
