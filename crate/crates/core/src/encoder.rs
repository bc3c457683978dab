//! Masked encoder: pyramid fusion, the region catalog, per-frame region
//! masking and the final 3-D average pooling.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::stage_channels;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Graph, Initializer, ParamStore, Scalar, Tensor, Var};

/// Kernel and stride of the final pooling; the unique pair that maps
/// `[T/2, H/8, W/8, C]` to `[T/2 - 1, H/32, W/32, C]`.
pub const POOL_KERNEL: [usize; 3] = [2, 4, 4];
pub const POOL_STRIDE: [usize; 3] = [1, 4, 4];

/// Region-catalog generation parameters, measured on the fused feature map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    /// Grid cell side `g`, in feature cells.
    pub grid_cell: usize,
    /// Smallest region width `dx`, in grid cells.
    pub delta_x: usize,
    /// Smallest region height `dy`, in grid cells.
    pub delta_y: usize,
    /// Area threshold `delta` as a fraction of the canvas.
    pub threshold: f64,
}

/// Rectangle `r(i, j, w*dx, h*dy)` anchored at grid point `(i, j)` (row, column).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Region {
    pub i: usize,
    pub j: usize,
    /// Height multiplier `h`; the region spans `h * dy` grid rows.
    pub h: usize,
    /// Width multiplier `w`; the region spans `w * dx` grid columns.
    pub w: usize,
    pub delta_x: usize,
    pub delta_y: usize,
    pub grid_cell: usize,
}

impl Region {
    /// Covered feature-cell rows.
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.i * self.grid_cell..(self.i + self.h * self.delta_y) * self.grid_cell
    }

    /// Covered feature-cell columns.
    pub fn cols(&self) -> std::ops::Range<usize> {
        self.j * self.grid_cell..(self.j + self.w * self.delta_x) * self.grid_cell
    }

    /// Area in feature cells.
    pub fn area(&self) -> usize {
        (self.h * self.delta_y * self.grid_cell) * (self.w * self.delta_x * self.grid_cell)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows().contains(&row) && self.cols().contains(&col)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionCatalog {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub params: RegionParams,
    pub regions: Vec<Region>,
}

impl RegionCatalog {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Canvas area in feature cells.
    pub fn canvas_area(&self) -> usize {
        self.grid_rows * self.grid_cols * self.params.grid_cell * self.params.grid_cell
    }

    /// Region count per area (in feature cells).
    pub fn area_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for r in &self.regions {
            *h.entry(r.area()).or_insert(0) += 1;
        }
        h
    }
}

/// Every `(i, j, h, w)` with `i, j >= 1`, `i + h*dy < G_y`, `j + w*dx < G_x` and
/// area strictly below `threshold` times the canvas, in lexicographic order.
pub fn enumerate_regions(grid_rows: usize, grid_cols: usize, params: RegionParams) -> RegionCatalog {
    let RegionParams {
        grid_cell: g,
        delta_x: dx,
        delta_y: dy,
        threshold,
    } = params;
    let canvas = (grid_rows * g * grid_cols * g) as f64;
    let mut regions = Vec::new();
    if dx > 0 && dy > 0 && g > 0 {
        for i in 1..grid_rows {
            for j in 1..grid_cols {
                for h in (1..).take_while(|h| i + h * dy < grid_rows) {
                    for w in (1..).take_while(|w| j + w * dx < grid_cols) {
                        let r = Region {
                            i,
                            j,
                            h,
                            w,
                            delta_x: dx,
                            delta_y: dy,
                            grid_cell: g,
                        };
                        if (r.area() as f64) < threshold * canvas {
                            regions.push(r);
                        }
                    }
                }
            }
        }
    }
    RegionCatalog {
        grid_rows,
        grid_cols,
        params,
        regions,
    }
}

/// Catalog for the fused map of a model configuration.
pub fn catalog_for(cfg: &ModelConfig) -> Result<RegionCatalog> {
    let (fh, fw) = cfg.fused_hw();
    let g = cfg.regions.grid_cell;
    if g == 0 || fh % g != 0 || fw % g != 0 {
        return Err(Error::Config(format!(
            "grid cell {g} does not divide the fused map {fh}x{fw}"
        )));
    }
    Ok(enumerate_regions(fh / g, fw / g, cfg.regions))
}

/// One region per frame, drawn uniformly and independently.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub regions: Vec<Region>,
    pub seed: u64,
}

pub fn sample_mask_plan(catalog: &RegionCatalog, frames: usize, seed: u64) -> Result<MaskPlan> {
    if frames > 0 && catalog.is_empty() {
        return Err(Error::Config(
            "masking enabled with an empty region catalog; disable masking instead".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions = (0..frames)
        .map(|_| catalog.regions[rng.gen_range(0..catalog.len())])
        .collect();
    Ok(MaskPlan { regions, seed })
}

thread_local! {
    static MASK_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of times a mask plan has been applied on the current thread.
pub fn mask_applications() -> usize {
    MASK_CALLS.with(Cell::get)
}

/// 0/1 keep-factor for `[t, h, w, c]`: zero inside each frame's region.
pub fn mask_factor<T: Scalar>(shape: &[usize], plan: &MaskPlan) -> Result<Tensor<T>> {
    let &[t, h, w, c] = shape else {
        return Err(Error::Shape(format!("mask expects [t, h, w, c], got {shape:?}")));
    };
    if plan.regions.len() != t {
        return Err(Error::Invariant(format!(
            "mask plan has {} frames, feature map has {t}",
            plan.regions.len()
        )));
    }
    let mut f = Tensor::ones(shape);
    for (ti, r) in plan.regions.iter().enumerate() {
        if r.rows().end > h || r.cols().end > w {
            return Err(Error::Invariant(format!(
                "region {r:?} exceeds the {h}x{w} feature map"
            )));
        }
        for row in r.rows() {
            for col in r.cols() {
                let o = ((ti * h + row) * w + col) * c;
                f.data_mut()[o..o + c].fill(T::zero());
            }
        }
    }
    Ok(f)
}

/// Zeroes every feature cell inside frame `t`'s region. `None` passes the map through.
pub fn apply_mask<T: Scalar>(g: &mut Graph<T>, fused: Var, plan: Option<&MaskPlan>) -> Result<Var> {
    let Some(plan) = plan else { return Ok(fused) };
    MASK_CALLS.with(|c| c.set(c.get() + 1));
    let factor = mask_factor(g.shape(fused), plan)?;
    g.mul_const(fused, &factor)
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, init: &mut Initializer, store: &mut ParamStore<T>) -> Result<()> {
    let per_stage = cfg.fused_channels / cfg.stages;
    for m in 1..=cfg.stages {
        let cm = stage_channels(cfg, m);
        store.insert(format!("encoder.fuse{m}.weight"), init.weight(cm, per_stage))?;
        store.insert(format!("encoder.fuse{m}.bias"), init.bias(per_stage))?;
    }
    Ok(())
}

/// Projects each stage to `C / M` channels, resizes it to the stride-8 grid
/// and concatenates the results in stage order.
pub fn fuse_pyramid<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    stages: &[Var],
) -> Result<Var> {
    if cfg.stages == 0 || !cfg.fused_channels.is_multiple_of(cfg.stages) {
        return Err(Error::Config(format!(
            "fused channels {} not divisible by stage count {}",
            cfg.fused_channels, cfg.stages
        )));
    }
    if stages.len() != cfg.stages {
        return Err(Error::Shape(format!(
            "expected {} pyramid stages, got {}",
            cfg.stages,
            stages.len()
        )));
    }
    let target = cfg.fused_hw();
    let mut parts = Vec::with_capacity(stages.len());
    for (idx, &s) in stages.iter().enumerate() {
        let m = idx + 1;
        let w = g.param(store, &format!("encoder.fuse{m}.weight"))?;
        let b = g.param(store, &format!("encoder.fuse{m}.bias"))?;
        let projected = g.linear(s, w, Some(b))?;
        parts.push(g.resize_spatial(projected, target)?);
    }
    g.concat(&parts)
}

/// Average pooling to the final video representation `[T/2 - 1, H/32, W/32, C]`.
pub fn pool_final<T: Scalar>(g: &mut Graph<T>, fused: Var) -> Result<Var> {
    let s = g.shape(fused);
    if s.len() != 4 || s[0] < 2 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
        return Err(Error::Pooling(format!(
            "final pooling needs [t >= 2, h % 4 == 0, w % 4 == 0, c], got {s:?}"
        )));
    }
    g.avg_pool3d(fused, POOL_KERNEL, POOL_STRIDE)
}
