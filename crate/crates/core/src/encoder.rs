//! Voxelization and the shared pillar-style BEV encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::nn::{Conv, Linear};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelConfig {
    pub voxel_size: [f64; 3],
    pub range_xy: [f64; 2],
    pub range_z: [f64; 2],
    pub max_points_per_voxel: usize,
    pub downsample: usize,
    pub channels: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            voxel_size: [0.2, 0.2, 0.4],
            range_xy: [-100.0, 100.0],
            range_z: [-10.0, 6.0],
            max_points_per_voxel: 20,
            downsample: 8,
            channels: 16,
        }
    }
}

fn steps(lo: f64, hi: f64, size: f64) -> Option<usize> {
    let n = (hi - lo) / size;
    let r = n.round();
    ((n - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
}

impl VoxelConfig {
    /// Voxel counts along x, y and z.
    pub fn voxel_dims(&self) -> Result<[usize; 3]> {
        let bad = |what: &str| Error::invalid("voxel config", format!("{what} range is not a whole number of voxels"));
        let nx = steps(self.range_xy[0], self.range_xy[1], self.voxel_size[0]).ok_or_else(|| bad("x"))?;
        let ny = steps(self.range_xy[0], self.range_xy[1], self.voxel_size[1]).ok_or_else(|| bad("y"))?;
        let nz = steps(self.range_z[0], self.range_z[1], self.voxel_size[2]).ok_or_else(|| bad("z"))?;
        Ok([nx, ny, nz])
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, _] = self.voxel_dims()?;
        if self.max_points_per_voxel == 0 {
            return Err(Error::invalid("voxel config", "max_points_per_voxel must be at least 1"));
        }
        if self.downsample == 0 || nx % self.downsample != 0 || ny % self.downsample != 0 {
            return Err(Error::invalid("voxel config", "downsample must divide the voxel grid"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("voxel config", "channels must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BevGrid> {
        self.validate()?;
        let [nx, ny, _] = self.voxel_dims()?;
        Ok(BevGrid {
            height: ny / self.downsample,
            width: nx / self.downsample,
            cell_x: self.voxel_size[0] * self.downsample as f64,
            cell_y: self.voxel_size[1] * self.downsample as f64,
            origin: [self.range_xy[0], self.range_xy[0]],
        })
    }
}

/// The BEV raster: row index follows y, column index follows x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGrid {
    pub height: usize,
    pub width: usize,
    pub cell_x: f64,
    pub cell_y: f64,
    pub origin: [f64; 2],
}

impl BevGrid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (row, col) = (cell / self.width, cell % self.width);
        [self.origin[0] + (col as f64 + 0.5) * self.cell_x, self.origin[1] + (row as f64 + 0.5) * self.cell_y]
    }

    /// Row-major cell containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let col = ((x - self.origin[0]) / self.cell_x).floor();
        let row = ((y - self.origin[1]) / self.cell_y).floor();
        (col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height)
            .then(|| row as usize * self.width + col as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    /// `(ix, iy, iz)`.
    pub index: [usize; 3],
    pub points: Vec<[f64; 4]>,
}

/// Occupied voxels ordered by `(iy, ix, iz)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct VoxelSet {
    pub voxels: Vec<Voxel>,
}

fn lexicographic(a: &[f64; 4], b: &[f64; 4]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Bins points into voxels over half-open ranges, keeping at most
/// `max_points_per_voxel` per voxel after a lexicographic sort.
pub fn voxelize(points: &[[f64; 4]], cfg: &VoxelConfig) -> Result<VoxelSet> {
    let dims = cfg.voxel_dims()?;
    let mins = [cfg.range_xy[0], cfg.range_xy[0], cfg.range_z[0]];
    let mut sorted: Vec<[f64; 4]> = points.to_vec();
    sorted.sort_by(lexicographic);
    let mut keyed: Vec<([usize; 3], [f64; 4])> = Vec::with_capacity(sorted.len());
    for p in sorted {
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let f = ((p[a] - mins[a]) / cfg.voxel_size[a]).floor();
            if !(f >= 0.0 && f < dims[a] as f64) {
                inside = false;
                break;
            }
            idx[a] = f as usize;
        }
        if inside {
            keyed.push((idx, p));
        }
    }
    // Stable, so the lexicographic order survives inside each voxel.
    keyed.sort_by_key(|(i, _)| (i[1], i[0], i[2]));
    let mut voxels: Vec<Voxel> = Vec::new();
    for (index, p) in keyed {
        match voxels.last_mut() {
            Some(v) if v.index == index => {
                if v.points.len() < cfg.max_points_per_voxel {
                    v.points.push(p);
                }
            }
            _ => voxels.push(Voxel { index, points: vec![p] }),
        }
    }
    Ok(VoxelSet { voxels })
}

pub const VOXEL_DESCRIPTOR: usize = 5;

/// Variance floor of the per-cell channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Shared encoder Φ: voxel descriptor → linear → column max → strided patch
/// embedding → 3×3 convolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub voxel_fc: Linear,
    pub patch: ParamId,
    pub conv: Conv,
    pub cfg: VoxelConfig,
    pub grid: BevGrid,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &VoxelConfig, rng: &mut impl Rng) -> Result<Self> {
        let grid = cfg.grid()?;
        let c = cfg.channels;
        let s = cfg.downsample * cfg.downsample;
        let voxel_fc = Linear::new(store, "encoder.voxel_fc", VOXEL_DESCRIPTOR, c, true, rng);
        let patch = store.add_uniform("encoder.patch.weight", &[s, c, c], s * c, rng);
        let conv = Conv::new(store, "encoder.conv", c, c, 3, false, rng);
        Ok(Self { voxel_fc, patch, conv, cfg: cfg.clone(), grid })
    }

    fn descriptors(&self, voxels: &VoxelSet) -> Tensor {
        let vs = self.cfg.voxel_size;
        let mins = [self.cfg.range_xy[0], self.cfg.range_xy[0], self.cfg.range_z[0]];
        let cap = self.cfg.max_points_per_voxel as f64;
        let mut data = Vec::with_capacity(voxels.voxels.len() * VOXEL_DESCRIPTOR);
        for v in &voxels.voxels {
            let n = v.points.len() as f64;
            for a in 0..3 {
                let center = mins[a] + (v.index[a] as f64 + 0.5) * vs[a];
                data.push(v.points.iter().map(|p| p[a] - center).sum::<f64>() / n);
            }
            data.push(v.points.iter().map(|p| p[3]).sum::<f64>() / n);
            data.push(n / cap);
        }
        Tensor::new(&[voxels.voxels.len(), VOXEL_DESCRIPTOR], data).expect("descriptor shape")
    }

    /// `F = Φ(X)` as a `[C, H, W]` variable.
    pub fn encode(&self, g: &mut Graph, voxels: &VoxelSet) -> Result<Var> {
        let c = self.cfg.channels;
        let (h, w) = (self.grid.height, self.grid.width);
        let ds = self.cfg.downsample;
        let n_cells = h * w;
        if voxels.voxels.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[c, h, w])));
        }

        let desc = g.constant(self.descriptors(voxels));
        let feats = self.voxel_fc.forward(g, desc)?;
        let feats = g.silu(feats);

        // Voxels are sorted by (iy, ix, iz), so each column is one run.
        let mut column = Vec::with_capacity(voxels.voxels.len());
        let mut cells = Vec::new();
        let mut subpos = Vec::new();
        let mut last = None;
        for v in &voxels.voxels {
            let key = (v.index[1], v.index[0]);
            if last != Some(key) {
                last = Some(key);
                let (iy, ix) = key;
                cells.push((iy / ds) * w + ix / ds);
                subpos.push((iy % ds) * ds + ix % ds);
            }
            column.push(cells.len() - 1);
        }
        let pillars = g.segment_max(feats, &column, cells.len())?;
        let weight = g.param(self.patch);
        let bev = g.patch_embed(pillars, weight, &cells, &subpos, n_cells)?;
        let bev = g.silu(bev);
        let bev = g.reshape(bev, &[h, w, c])?;
        let bev = g.permute(bev, &[2, 0, 1])?;
        let out = self.conv.forward(g, bev)?;
        let out = g.permute(out, &[1, 2, 0])?;
        let out = g.normalize_last(out, NORM_EPS)?;
        let out = g.silu(out);
        g.permute(out, &[2, 0, 1])
    }

    /// Convenience wrapper returning the map as a plain tensor.
    pub fn encode_points(&self, store: &ParamStore, points: &[[f64; 4]]) -> Result<Tensor> {
        let voxels = voxelize(points, &self.cfg)?;
        let mut g = Graph::new(store);
        let v = self.encode(&mut g, &voxels)?;
        Ok(g.value(v).clone())
    }
}
