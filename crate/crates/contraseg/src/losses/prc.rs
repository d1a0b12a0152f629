//! Pairwise regional contrast: earth-mover matching between static patches
//! of the attention branch and dynamically sampled patches of the target
//! branch, taking the cheapest pair.

use rand::Rng;

use super::sinkhorn::{sinkhorn_emd_weights, SinkhornConfig};
use super::{invalid, Rect, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Static grid partition plus the sampled dynamic patch parameters, all in
/// feature-grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub static_grid: (usize, usize),
    pub width: usize,
    pub height: usize,
    pub stride_w: usize,
    pub stride_h: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.static_grid.0 == 0 || self.static_grid.1 == 0 {
            return Err(invalid("patch_config", "empty static grid"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("patch_config", "dynamic patch extent must be >= 1"));
        }
        if self.stride_w == 0 || self.stride_h == 0 {
            return Err(invalid("patch_config", "strides must be >= 1"));
        }
        Ok(())
    }

    /// Draw dynamic patch extents uniformly from [ceil(g/2), g] where g is
    /// the per-axis cell extent of one static patch, and strides uniformly
    /// from [1, extent].
    pub fn sample(
        grid_extent: (usize, usize),
        static_grid: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cell_h = grid_extent.0 / static_grid.0;
        let cell_w = grid_extent.1 / static_grid.1;
        if cell_h == 0 || cell_w == 0 {
            return Err(invalid(
                "patch_config",
                format!("grid {grid_extent:?} too small for static grid {static_grid:?}"),
            ));
        }
        let height = rng.random_range(cell_h.div_ceil(2)..=cell_h);
        let width = rng.random_range(cell_w.div_ceil(2)..=cell_w);
        let stride_h = rng.random_range(1..=height);
        let stride_w = rng.random_range(1..=width);
        let cfg = Self {
            static_grid,
            width,
            height,
            stride_w,
            stride_h,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Non-overlapping static patches: the grid partition of the feature map,
/// each patch floor(extent/grid) cells, trailing remainder cells unused.
pub fn static_patch_rects(extent: (usize, usize), grid: (usize, usize)) -> Result<Vec<Rect>> {
    let (gh, gw) = extent;
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || gh / rows == 0 || gw / cols == 0 {
        return Err(invalid(
            "static_patch_rects",
            format!("grid {grid:?} does not fit extent {extent:?}"),
        ));
    }
    let (ph, pw) = (gh / rows, gw / cols);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(Rect {
                top: r * ph,
                left: c * pw,
                height: ph,
                width: pw,
            });
        }
    }
    Ok(out)
}

/// Every dynamic patch position for the sampled parameters: a sliding window
/// over the feature map, strides in cells.
pub fn dynamic_patch_rects(extent: (usize, usize), cfg: &PatchConfig) -> Result<Vec<Rect>> {
    cfg.validate()?;
    let (gh, gw) = extent;
    if cfg.height > gh || cfg.width > gw {
        return Err(invalid(
            "dynamic_patch_rects",
            format!("patch {}x{} exceeds grid {extent:?}", cfg.height, cfg.width),
        ));
    }
    let mut out = Vec::new();
    let mut top = 0;
    while top + cfg.height <= gh {
        let mut left = 0;
        while left + cfg.width <= gw {
            out.push(Rect {
                top,
                left,
                height: cfg.height,
                width: cfg.width,
            });
            left += cfg.stride_w;
        }
        top += cfg.stride_h;
    }
    Ok(out)
}

/// Draw `count` dynamic patches without replacement (all of them when fewer
/// exist).
pub fn sample_dynamic_rects(
    extent: (usize, usize),
    cfg: &PatchConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Rect>> {
    let mut all = dynamic_patch_rects(extent, cfg)?;
    if all.len() <= count {
        return Ok(all);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.random_range(0..all.len());
        out.push(all.swap_remove(i));
    }
    Ok(out)
}

/// Per-cell transport weight: the summed foreground activation of that cell
/// (the background channel, stored last, is excluded), normalised to sum 1.
/// An all-zero foreground patch falls back to uniform weights.
pub fn marginal_weights(patch: &Tensor) -> Vec<f64> {
    assert_eq!(patch.rank(), 3, "patch must be [C x h x w]");
    let (c, h, w) = (patch.shape()[0], patch.shape()[1], patch.shape()[2]);
    let cells = h * w;
    let mut weights = vec![0.0; cells];
    for ch in 0..c.saturating_sub(1) {
        for i in 0..cells {
            weights[i] += patch.data()[ch * cells + i];
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 1e-12 {
        return vec![1.0 / cells as f64; cells];
    }
    for v in &mut weights {
        *v /= total;
    }
    weights
}

/// Graph-side marginal weights for patch rows [cells x C] (background channel
/// last). Returns the weight node and its current values. Falls back to a
/// constant uniform vector when the foreground mass vanishes.
fn marginal_weights_var(g: &mut Graph, rows: Var) -> Result<(Var, Vec<f64>)> {
    let shape = g.shape(rows).to_vec();
    let (cells, c) = (shape[0], shape[1]);
    let mut mask = Tensor::zeros(&[c, 1]);
    for ch in 0..c - 1 {
        mask.data_mut()[ch] = 1.0;
    }
    let mask_v = g.constant(&mask);
    let fg = g.matmul(rows, mask_v)?;
    let fg = g.reshape(fg, &[cells])?;
    let total = g.sum_all(fg);
    if g.item(total) <= 1e-12 {
        let uniform = Tensor::full(&[cells], 1.0 / cells as f64);
        let u = g.constant(&uniform);
        let vals = uniform.data().to_vec();
        return Ok((u, vals));
    }
    let one = g.scalar(1.0);
    let inv = g.div(one, total)?;
    let inv_wide = g.broadcast_row(inv, cells)?;
    let inv_wide = g.reshape(inv_wide, &[cells])?;
    let wn = g.mul(fg, inv_wide)?;
    let vals = g.data(wn).to_vec();
    Ok((wn, vals))
}

/// Patch rows [cells x C] for a window of a [C x gh x gw] map.
fn patch_rows(g: &mut Graph, map: Var, rect: &Rect) -> Result<Var> {
    let cropped = g.crop_spatial(map, rect.top, rect.left, rect.height, rect.width)?;
    let c = g.shape(cropped)[0];
    let cells = rect.height * rect.width;
    let flat = g.reshape(cropped, &[c, cells])?;
    Ok(g.transpose(flat)?)
}

#[derive(Debug, Clone)]
pub struct PrcLoss {
    /// The minimum transport cost over all static/dynamic patch pairs.
    /// Gradient reaches only the minimising pair's static-branch features.
    pub loss: Var,
    pub min_pair: (usize, usize),
    /// All pairwise costs, indexed [static][dynamic].
    pub costs: Vec<Vec<f64>>,
    /// Pairs whose Sinkhorn solve hit the iteration cap.
    pub nonconverged: usize,
}

/// Cheapest earth-mover match between the static patches of the online map
/// and the sampled dynamic patches of the target map. Both maps are
/// background-included activation maps [C x gh x gw]; the target branch is
/// stop-gradient.
pub fn prc_loss(
    g: &mut Graph,
    static_map: Var,
    dynamic_map: Var,
    static_grid: (usize, usize),
    dynamic_rects: &[Rect],
    sk: &SinkhornConfig,
    eps: f64,
) -> Result<PrcLoss> {
    let s_shape = g.shape(static_map).to_vec();
    let d_shape = g.shape(dynamic_map).to_vec();
    if s_shape.len() != 3 || d_shape.len() != 3 || s_shape[0] != d_shape[0] {
        return Err(invalid(
            "prc_loss",
            format!("maps must be [C x h x w] with equal C: {s_shape:?} vs {d_shape:?}"),
        ));
    }
    if dynamic_rects.is_empty() {
        return Err(invalid("prc_loss", "need at least one dynamic patch"));
    }
    for r in dynamic_rects {
        if r.bottom() > d_shape[1] || r.right() > d_shape[2] {
            return Err(invalid(
                "prc_loss",
                format!("dynamic patch {r:?} outside map {d_shape:?}"),
            ));
        }
    }
    let statics = static_patch_rects((s_shape[1], s_shape[2]), static_grid)?;

    let target = g.stop_gradient(dynamic_map);
    let dyn_patches: Vec<(Var, Var, Vec<f64>)> = dynamic_rects
        .iter()
        .map(|r| -> Result<_> {
            let rows = patch_rows(g, target, r)?;
            let (w, wv) = marginal_weights_var(g, rows)?;
            Ok((rows, w, wv))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, (usize, usize), Var)> = None;
    let mut costs = vec![vec![0.0; dyn_patches.len()]; statics.len()];
    let mut nonconverged = 0;
    for (si, srect) in statics.iter().enumerate() {
        let srows = patch_rows(g, static_map, srect)?;
        let (sw, _swv) = marginal_weights_var(g, srows)?;
        for (di, (drows, dw, _dwv)) in dyn_patches.iter().enumerate() {
            let sim = g.cosine_matrix(srows, *drows, eps)?;
            let neg = g.neg(sim);
            let cost = g.add_scalar(neg, 1.0);
            let r = sinkhorn_emd_weights(g, cost, sw, *dw, sk)?;
            if !r.converged {
                nonconverged += 1;
            }
            let value = g.item(r.cost);
            costs[si][di] = value;
            match &best {
                Some((b, _, _)) if *b <= value => {}
                _ => best = Some((value, (si, di), r.cost)),
            }
        }
    }
    let (_, min_pair, loss) = best.expect("at least one pair");
    Ok(PrcLoss {
        loss,
        min_pair,
        costs,
        nonconverged,
    })
}
