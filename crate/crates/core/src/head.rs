//! Anchor-free detection head: dense heatmap, top-k query selection, one
//! decoder layer, and box regression branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::BevGrid;
use crate::error::{Error, Result};
use crate::eval::rotated_bev_iou;
use crate::geometry::{normalize_angle, Box3d};
use crate::him::HEATMAP_PRIOR_BIAS;
use crate::numcore::nn::{Conv, Linear, MultiHeadAttention};
use crate::numcore::{max_pool_peaks, sigmoid, Graph, ParamStore, Tensor, Var};
use crate::scenesim::{ObjectClass, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Detection {
    pub fn geometry(&self) -> Box3d {
        Box3d { center: self.center, size: self.size, yaw: self.yaw }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub top_k: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub nms_iou: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { top_k: 64, heads: 8, model_dim: 256, nms_iou: 0.2 }
    }
}

/// Regression targets per query: offset (2), z (1), log-dims (3), sin/cos (2).
pub const BOX_PARAMS: usize = 8;

#[derive(Clone, Debug)]
pub struct Head {
    pub input_proj: Linear,
    pub heatmap: Conv,
    pub query_proj: Linear,
    pub self_attention: MultiHeadAttention,
    pub cross_attention: MultiHeadAttention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub offset: Linear,
    pub height: Linear,
    pub dims: Linear,
    pub rotation: Linear,
    pub class: Linear,
    pub cfg: HeadConfig,
}

/// Raw head outputs for the selected query cells.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[K, H, W]` logits.
    pub heatmap: Var,
    pub cells: Vec<usize>,
    /// `[k, 2]`, `[k, 1]`, `[k, 3]`, `[k, 2]`, `[k, K]`.
    pub offset: Var,
    pub height: Var,
    pub dims: Var,
    pub rotation: Var,
    pub class_logits: Var,
}

impl Head {
    /// `in_channels` is the channel count of the concatenated fused and ego
    /// maps; `query_channels` the HIM query width (0 disables the concat).
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        query_channels: usize,
        cfg: &HeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.top_k == 0 {
            return Err(Error::invalid("head config", "top_k must be at least 1"));
        }
        if cfg.heads == 0 || !cfg.model_dim.is_multiple_of(cfg.heads) {
            return Err(Error::invalid("head config", "model_dim must be divisible by heads"));
        }
        let d = cfg.model_dim;
        let input_proj = Linear::new(store, "head.input_proj", in_channels, d, true, rng);
        let heatmap = Conv::new(store, "head.heatmap", d, NUM_CLASSES, 3, true, rng);
        store.get_mut(heatmap.bias.expect("heatmap bias")).tensor = Tensor::full(&[NUM_CLASSES], HEATMAP_PRIOR_BIAS);
        let query_proj = Linear::new(store, "head.query_proj", d + query_channels, d, true, rng);
        let self_attention = MultiHeadAttention::new(store, "head.self_attn", d, d, d, d, cfg.heads, rng);
        let cross_attention = MultiHeadAttention::new(store, "head.cross_attn", d, d, d, d, cfg.heads, rng);
        let ffn_in = Linear::new(store, "head.ffn_in", d, 2 * d, true, rng);
        let ffn_out = Linear::new(store, "head.ffn_out", 2 * d, d, true, rng);
        let offset = Linear::new(store, "head.offset", d, 2, true, rng);
        let height = Linear::new(store, "head.height", d, 1, true, rng);
        let dims = Linear::new(store, "head.dims", d, 3, true, rng);
        let rotation = Linear::new(store, "head.rotation", d, 2, true, rng);
        let class = Linear::new(store, "head.class", d, NUM_CLASSES, true, rng);
        Ok(Self {
            input_proj,
            heatmap,
            query_proj,
            self_attention,
            cross_attention,
            ffn_in,
            ffn_out,
            offset,
            height,
            dims,
            rotation,
            class,
            cfg: cfg.clone(),
        })
    }

    /// `input: [C_in, H, W]` (fused and ego maps already concatenated);
    /// `queries: [n_S·C, H, W]` when HIM queries are used.
    pub fn forward(&self, g: &mut Graph, input: Var, queries: Option<Var>) -> Result<HeadOutput> {
        let s = g.shape(input).to_vec();
        let (cin, h, w) = (s[0], s[1], s[2]);
        let d = self.cfg.model_dim;
        let x = g.permute(input, &[1, 2, 0])?;
        let x = g.reshape(x, &[h * w, cin])?;
        let tokens = self.input_proj.forward(g, x)?;
        let tokens = g.silu(tokens);
        let map = g.reshape(tokens, &[h, w, d])?;
        let map = g.permute(map, &[2, 0, 1])?;
        let heatmap = self.heatmap.forward(g, map)?;

        let cells = select_top_k(g.value(heatmap), self.cfg.top_k)?;
        let mut q = g.index_rows(tokens, &cells)?;
        if let Some(qm) = queries {
            let qc = g.shape(qm)[0];
            let qt = g.permute(qm, &[1, 2, 0])?;
            let qt = g.reshape(qt, &[h * w, qc])?;
            let rows = g.index_rows(qt, &cells)?;
            q = g.concat(&[q, rows], 1)?;
        }
        let q = self.query_proj.forward(g, q)?;
        let k = cells.len();
        let q = g.reshape(q, &[1, k, d])?;
        let sa = self.self_attention.forward(g, q, q, None)?;
        let q = g.add(q, sa)?;
        let keys = g.reshape(tokens, &[1, h * w, d])?;
        let ca = self.cross_attention.forward(g, q, keys, None)?;
        let q = g.add(q, ca)?;
        let f = self.ffn_in.forward(g, q)?;
        let f = g.silu(f);
        let f = self.ffn_out.forward(g, f)?;
        let q = g.add(q, f)?;
        let q = g.reshape(q, &[k, d])?;
        Ok(HeadOutput {
            heatmap,
            offset: self.offset.forward(g, q)?,
            height: self.height.forward(g, q)?,
            dims: self.dims.forward(g, q)?,
            rotation: self.rotation.forward(g, q)?,
            class_logits: self.class.forward(g, q)?,
            cells,
        })
    }
}

/// Picks `top_k` cells: local peaks first, by their best peaked class σ, then
/// the remaining cells by max-class σ. Ties go to the lower row-major index.
pub fn select_top_k(logits: &Tensor, top_k: usize) -> Result<Vec<usize>> {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let hw = h * w;
    if top_k > hw {
        return Err(Error::invalid("decode", format!("top_k {top_k} exceeds {hw} cells")));
    }
    let peaks = max_pool_peaks(logits, 3)?;
    let mut ranked: Vec<(bool, f64, usize)> = (0..hw)
        .map(|cell| {
            let mut best_peak = f64::NEG_INFINITY;
            let mut best = f64::NEG_INFINITY;
            for c in 0..k {
                let l = logits.data()[c * hw + cell];
                best = best.max(l);
                if peaks.data()[c * hw + cell] > 0.0 {
                    best_peak = best_peak.max(l);
                }
            }
            if best_peak > f64::NEG_INFINITY {
                (true, best_peak, cell)
            } else {
                (false, best, cell)
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    Ok(ranked.into_iter().take(top_k).map(|(_, _, c)| c).collect())
}

/// Raw branch values for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchValues {
    pub offset: [f64; 2],
    pub z: f64,
    pub log_dims: [f64; 3],
    pub sin_cos: [f64; 2],
    pub class_logits: [f64; NUM_CLASSES],
}

pub fn decode_one(cell: usize, v: &BranchValues, grid: &BevGrid) -> Detection {
    let [cx, cy] = grid.cell_center(cell);
    let (mut class, mut best) = (0, f64::NEG_INFINITY);
    for (i, &l) in v.class_logits.iter().enumerate() {
        if l > best {
            best = l;
            class = i;
        }
    }
    Detection {
        class: ObjectClass::from_index(class).expect("class index"),
        score: sigmoid(best),
        center: [cx + v.offset[0] * grid.cell_x, cy + v.offset[1] * grid.cell_y, v.z],
        size: v.log_dims.map(f64::exp),
        yaw: normalize_angle(v.sin_cos[0].atan2(v.sin_cos[1])),
    }
}

impl HeadOutput {
    pub fn branch_values(&self, g: &Graph) -> Vec<BranchValues> {
        let (o, z, d, r, c) = (
            g.value(self.offset).data(),
            g.value(self.height).data(),
            g.value(self.dims).data(),
            g.value(self.rotation).data(),
            g.value(self.class_logits).data(),
        );
        (0..self.cells.len())
            .map(|i| BranchValues {
                offset: [o[2 * i], o[2 * i + 1]],
                z: z[i],
                log_dims: [d[3 * i], d[3 * i + 1], d[3 * i + 2]],
                sin_cos: [r[2 * i], r[2 * i + 1]],
                class_logits: std::array::from_fn(|k| c[NUM_CLASSES * i + k]),
            })
            .collect()
    }

    /// Decoded boxes for every selected query, before NMS.
    pub fn decode(&self, g: &Graph, grid: &BevGrid) -> Vec<Detection> {
        self.cells.iter().zip(self.branch_values(g)).map(|(&cell, v)| decode_one(cell, &v, grid)).collect()
    }
}

/// Class-aware greedy NMS on rotated BEV IoU.
pub fn nms(detections: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        let suppressed = kept.iter().any(|k| {
            k.class == d.class && rotated_bev_iou(&k.geometry(), &d.geometry()).is_ok_and(|iou| iou > iou_thr)
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
