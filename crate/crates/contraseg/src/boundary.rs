//! Boundary-contrast refinement for the segmentation decoder: Sobel-derived
//! boundary points on the predicted class map, inward/outward point sets
//! displaced along the quantised gradient, signed one-to-all similarity
//! between them, and the resulting loss added to the cross-entropy term.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum BoundaryError {
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, BoundaryError>;

fn invalid(op: &'static str, msg: impl Into<String>) -> BoundaryError {
    BoundaryError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Stabiliser for log of signed similarity means.
pub const LOG_FLOOR: f64 = 1e-6;

// ── class maps ───────────────────────────────────────────────────────

/// Dense per-pixel class assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(
                "class_map",
                format!(
                    "{}x{} needs {} entries, got {}",
                    height,
                    width,
                    height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Channel-wise argmax of a [C x H x W] score tensor; ties take the
    /// lowest class index.
    pub fn from_argmax(scores: &Tensor) -> Result<Self> {
        if scores.rank() != 3 {
            return Err(invalid("class_map", "argmax source must be [C x H x W]"));
        }
        let (c, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
        if c > u8::MAX as usize + 1 {
            return Err(invalid("class_map", "too many classes for u8 storage"));
        }
        let mut data = vec![0u8; h * w];
        for i in 0..h * w {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0u8;
            for ch in 0..c {
                let v = scores.data()[ch * h * w + i];
                if v > best {
                    best = v;
                    arg = ch as u8;
                }
            }
            data[i] = arg;
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn distinct_classes(&self) -> usize {
        let mut seen = [false; 256];
        let mut n = 0;
        for &v in &self.data {
            if !seen[v as usize] {
                seen[v as usize] = true;
                n += 1;
            }
        }
        n
    }
}

// ── orientation ──────────────────────────────────────────────────────

/// The 8-neighbourhood displacements in quantisation order: angle 0 points
/// right (+x), angles advance towards +y (down).
pub const DIRECTIONS8: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Sobel response of the class map with the boundary selection applied.
#[derive(Debug, Clone)]
pub struct OrientationMap {
    pub gx: Tensor,
    pub gy: Tensor,
    pub magnitude: Tensor,
    /// Quantised gradient direction index into [`DIRECTIONS8`]; only
    /// meaningful where `magnitude` is non-zero.
    pub direction8: Vec<u8>,
    /// Top 20% of non-zero gradient magnitudes (ties resolved row-major).
    pub boundary_mask: Vec<bool>,
}

impl OrientationMap {
    pub fn boundary_points(&self) -> Vec<(usize, usize)> {
        let w = self.gx.shape()[1];
        self.boundary_mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }
}

/// Sobel gradients of the class-index map (replicated borders), gradient
/// directions quantised to the 8-neighbourhood, and the top-20% magnitude
/// boundary mask over non-zero responses.
pub fn orientation_map(seg: &ClassMap) -> OrientationMap {
    let (h, w) = (seg.height, seg.width);
    let v = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        seg.at(r, c) as f64
    };
    let mut gx = Tensor::zeros(&[h, w]);
    let mut gy = Tensor::zeros(&[h, w]);
    let mut magnitude = Tensor::zeros(&[h, w]);
    let mut direction8 = vec![0u8; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let dx = (v(r - 1, c + 1) + 2.0 * v(r, c + 1) + v(r + 1, c + 1))
                - (v(r - 1, c - 1) + 2.0 * v(r, c - 1) + v(r + 1, c - 1));
            let dy = (v(r + 1, c - 1) + 2.0 * v(r + 1, c) + v(r + 1, c + 1))
                - (v(r - 1, c - 1) + 2.0 * v(r - 1, c) + v(r - 1, c + 1));
            let i = r as usize * w + c as usize;
            gx.data_mut()[i] = dx;
            gy.data_mut()[i] = dy;
            let mag = (dx * dx + dy * dy).sqrt();
            magnitude.data_mut()[i] = mag;
            if mag > 0.0 {
                let angle = dy.atan2(dx);
                let step = std::f64::consts::PI / 4.0;
                let idx = ((angle / step).round() as i64).rem_euclid(8) as u8;
                direction8[i] = idx;
            }
        }
    }

    let mut nonzero: Vec<(f64, usize)> = magnitude
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, &m)| (m, i))
        .collect();
    let count = (nonzero.len() as f64 * 0.2).ceil() as usize;
    // strongest first; equal magnitudes keep row-major order
    nonzero.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut boundary_mask = vec![false; h * w];
    for &(_, i) in nonzero.iter().take(count) {
        boundary_mask[i] = true;
    }

    OrientationMap {
        gx,
        gy,
        magnitude,
        direction8,
        boundary_mask,
    }
}

// ── inward / outward point sets ──────────────────────────────────────

pub type Point = (usize, usize);

/// Candidate inward and outward points: each boundary pixel displaced
/// `steps` pixels along its quantised gradient direction (towards the higher
/// class index, i.e. into the object when objects sit on background 0) and
/// the same distance in the opposite direction. Out-of-bounds displacements
/// are dropped. `inward_along_gradient = false` flips which side is inward.
pub fn in_out_div(
    seg: &ClassMap,
    steps: usize,
    inward_along_gradient: bool,
) -> (Vec<Point>, Vec<Point>) {
    let om = orientation_map(seg);
    let (h, w) = (seg.height, seg.width);
    let mut inward = Vec::new();
    let mut outward = Vec::new();
    for (r, c) in om.boundary_points() {
        let (dx, dy) = DIRECTIONS8[om.direction8[r * w + c] as usize];
        let (dx, dy) = if inward_along_gradient {
            (dx, dy)
        } else {
            (-dx, -dy)
        };
        let s = steps as isize;
        let ir = r as isize + dy * s;
        let ic = c as isize + dx * s;
        if ir >= 0 && ir < h as isize && ic >= 0 && ic < w as isize {
            inward.push((ir as usize, ic as usize));
        }
        let out_r = r as isize - dy * s;
        let out_c = c as isize - dx * s;
        if out_r >= 0 && out_r < h as isize && out_c >= 0 && out_c < w as isize {
            outward.push((out_r as usize, out_c as usize));
        }
    }
    (inward, outward)
}

/// The sampled working sets: k points from each candidate pool, truncated
/// symmetrically when a pool is smaller than k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryPointSets {
    pub inward: Vec<Point>,
    pub outward: Vec<Point>,
}

impl BoundaryPointSets {
    pub fn is_empty(&self) -> bool {
        self.inward.is_empty() || self.outward.is_empty()
    }
}

/// Draw min(k, |phi|, |psi|) points from each candidate pool without
/// replacement.
pub fn select_point_sets(
    phi: &[Point],
    psi: &[Point],
    k: usize,
    rng: &mut impl Rng,
) -> BoundaryPointSets {
    let k_eff = k.min(phi.len()).min(psi.len());
    let mut draw = |pool: &[Point]| -> Vec<Point> {
        let mut pool = pool.to_vec();
        let mut out = Vec::with_capacity(k_eff);
        for _ in 0..k_eff {
            let i = rng.random_range(0..pool.len());
            out.push(pool.swap_remove(i));
        }
        out
    };
    let inward = draw(phi);
    let outward = draw(psi);
    BoundaryPointSets { inward, outward }
}

/// Channel vectors of `map` [C x H x W] at the given points, as [k x C].
pub fn anchor_points(map: &Tensor, points: &[Point]) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(invalid("anchor_points", "map must be [C x H x W]"));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut data = Vec::with_capacity(points.len() * c);
    for &(r, col) in points {
        if r >= h || col >= w {
            return Err(invalid(
                "anchor_points",
                format!("point ({r}, {col}) outside {h}x{w}"),
            ));
        }
        for ch in 0..c {
            data.push(map.data()[(ch * h + r) * w + col]);
        }
    }
    Tensor::new(&[points.len(), c], data).map_err(Into::into)
}

// ── signs ────────────────────────────────────────────────────────────

/// Threshold policy for the sign function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TauPolicy {
    Fixed(f64),
    /// The mean of the soft-mask similarity matrix.
    MaskMean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SignCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone)]
pub struct SignResult {
    /// One of {-1, +1} per inward point.
    pub sign_inward: Vec<f64>,
    pub sign_outward: Vec<f64>,
    pub inward_counts: SignCounts,
    pub outward_counts: SignCounts,
    /// The threshold actually used.
    pub tau: f64,
}

fn classify(mask_mean: f64, dense_mean: f64, tau: f64, counts: &mut SignCounts) -> f64 {
    // equality counts as ">= tau" on both sides
    let mask_high = mask_mean >= tau;
    let dense_high = dense_mean >= tau;
    match (mask_high, dense_high) {
        (true, true) => counts.tn += 1,
        (true, false) => counts.fp += 1,
        (false, true) => counts.fn_ += 1,
        (false, false) => counts.tp += 1,
    }
    // actual-condition-negative cases (mask says similar) get sign -1
    if mask_high {
        -1.0
    } else {
        1.0
    }
}

/// Point-wise signs from the mask and dense similarity matrices: row means
/// classify the inward set, column means the outward set. Cases where the
/// mask calls the pair similar (TN, FP) receive -1, the rest +1.
pub fn sign_fn(s_mask: &Tensor, s_dense: &Tensor, tau: TauPolicy) -> Result<SignResult> {
    if s_mask.rank() != 2 || s_mask.shape() != s_dense.shape() {
        return Err(invalid(
            "sign_fn",
            format!(
                "similarity matrices must agree, got {:?} and {:?}",
                s_mask.shape(),
                s_dense.shape()
            ),
        ));
    }
    let (ki, ko) = (s_mask.shape()[0], s_mask.shape()[1]);
    if ki == 0 || ko == 0 {
        return Err(invalid("sign_fn", "empty similarity matrix"));
    }
    let tau = match tau {
        TauPolicy::Fixed(v) => v,
        TauPolicy::MaskMean => s_mask.data().iter().sum::<f64>() / (ki * ko) as f64,
    };
    let mut inward_counts = SignCounts::default();
    let mut outward_counts = SignCounts::default();
    let row_mean = |t: &Tensor, i: usize| -> f64 {
        t.data()[i * ko..(i + 1) * ko].iter().sum::<f64>() / ko as f64
    };
    let col_mean = |t: &Tensor, j: usize| -> f64 {
        (0..ki).map(|i| t.data()[i * ko + j]).sum::<f64>() / ki as f64
    };
    let sign_inward = (0..ki)
        .map(|i| {
            classify(
                row_mean(s_mask, i),
                row_mean(s_dense, i),
                tau,
                &mut inward_counts,
            )
        })
        .collect();
    let sign_outward = (0..ko)
        .map(|j| {
            classify(
                col_mean(s_mask, j),
                col_mean(s_dense, j),
                tau,
                &mut outward_counts,
            )
        })
        .collect();
    Ok(SignResult {
        sign_inward,
        sign_outward,
        inward_counts,
        outward_counts,
        tau,
    })
}

// ── loss ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BeaconConfig {
    /// Weight of the boundary term in the stage-2 loss.
    pub lambda: f64,
    /// Displacement distance in pixels.
    pub steps: usize,
    /// Points sampled per set.
    pub k: usize,
    pub tau: TauPolicy,
    /// Displace inward points along the quantised gradient (towards the
    /// higher class index). The flag flips the convention.
    pub inward_along_gradient: bool,
}

impl Default for BeaconConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            steps: 7,
            k: 128,
            tau: TauPolicy::MaskMean,
            inward_along_gradient: true,
        }
    }
}

#[derive(Debug)]
pub struct BeaconLoss {
    pub loss: Var,
    pub signs: SignResult,
}

/// The boundary contrast term: signed one-to-all similarity means of the
/// dense-feature matrix, log-stabilised at [`LOG_FLOOR`]. The mask-side
/// vectors are plain values and the inward dense side is stop-gradient, so
/// gradient reaches only the outward dense features.
pub fn beacon_loss(
    g: &mut Graph,
    dense_inward: Var,
    dense_outward: Var,
    mask_inward: &Tensor,
    mask_outward: &Tensor,
    tau: TauPolicy,
    eps: f64,
) -> Result<BeaconLoss> {
    let si = g.shape(dense_inward).to_vec();
    let so = g.shape(dense_outward).to_vec();
    if si.len() != 2 || so.len() != 2 || si[1] != so[1] {
        return Err(invalid(
            "beacon_loss",
            format!("point sets must be [k x C]: {si:?} vs {so:?}"),
        ));
    }
    if mask_inward.shape()[0] != si[0] || mask_outward.shape()[0] != so[0] {
        return Err(invalid(
            "beacon_loss",
            "mask vectors must match the dense point counts",
        ));
    }

    let sg_inward = g.stop_gradient(dense_inward);
    let s_dense = g.cosine_matrix(sg_inward, dense_outward, eps)?;

    let s_mask = {
        let mut gm = Graph::new();
        let mi = gm.constant(mask_inward);
        let mo = gm.constant(mask_outward);
        let s = gm.cosine_matrix(mi, mo, eps)?;
        gm.detach(s)
    };

    let signs = sign_fn(&s_mask, &g.detach(s_dense), tau)?;

    let row_means = g.mean_axis(s_dense, 1)?;
    let col_means = g.mean_axis(s_dense, 0)?;
    let sign_i =
        Tensor::new(&[signs.sign_inward.len()], signs.sign_inward.clone()).expect("length matches");
    let sign_o = Tensor::new(&[signs.sign_outward.len()], signs.sign_outward.clone())
        .expect("length matches");
    let si_v = g.constant(&sign_i);
    let so_v = g.constant(&sign_o);
    let signed_rows = g.mul(row_means, si_v)?;
    let signed_cols = g.mul(col_means, so_v)?;
    let clamped_rows = g.clamp_min(signed_rows, LOG_FLOOR);
    let clamped_cols = g.clamp_min(signed_cols, LOG_FLOOR);
    let log_rows = g.log(clamped_rows);
    let log_cols = g.log(clamped_cols);
    let term_i = g.mean_all(log_rows);
    let term_o = g.mean_all(log_cols);
    let loss = g.add(term_o, term_i)?;
    Ok(BeaconLoss { loss, signs })
}

// ── stage-2 objective ────────────────────────────────────────────────

#[derive(Debug)]
pub struct SegLoss {
    pub total: Var,
    pub ce: Var,
    /// Present when lambda > 0 and the prediction produced a usable boundary.
    pub beacon: Option<BeaconLoss>,
    pub sets: Option<BoundaryPointSets>,
}

/// Soft-target cross entropy between the softmaxed dense prediction and the
/// pseudo mask, averaged over pixels, plus lambda times the boundary term
/// computed on point sets derived from the current prediction's argmax map.
pub fn seg_loss(
    g: &mut Graph,
    dense: Var,
    pseudo_mask: &Tensor,
    cfg: &BeaconConfig,
    rng: &mut impl Rng,
) -> Result<SegLoss> {
    let shape = g.shape(dense).to_vec();
    if shape.len() != 3 || pseudo_mask.shape() != shape.as_slice() {
        return Err(invalid(
            "seg_loss",
            format!("dense {shape:?} vs pseudo mask {:?}", pseudo_mask.shape()),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    // CE with soft targets: -mean_pixels sum_c pm_c log softmax(dense)_c
    let flat = g.reshape(dense, &[c, h * w])?;
    let lse = g.logsumexp_axis(flat, 0)?;
    let lse_wide = g.broadcast_row(lse, c)?;
    let logp = g.sub(flat, lse_wide)?;
    let pm_flat = {
        let t = Tensor::new(&[c, h * w], pseudo_mask.data().to_vec()).expect("same numel");
        g.constant(&t)
    };
    let weighted = g.mul(pm_flat, logp)?;
    let total_lp = g.sum_all(weighted);
    let ce = g.mul_scalar(total_lp, -1.0 / (h * w) as f64);

    if cfg.lambda == 0.0 {
        return Ok(SegLoss {
            total: ce,
            ce,
            beacon: None,
            sets: None,
        });
    }

    let seg_map = ClassMap::from_argmax(g.value(dense))?;
    let (phi, psi) = in_out_div(&seg_map, cfg.steps, cfg.inward_along_gradient);
    let sets = select_point_sets(&phi, &psi, cfg.k, rng);
    if sets.is_empty() {
        return Ok(SegLoss {
            total: ce,
            ce,
            beacon: None,
            sets: Some(sets),
        });
    }

    // anchor class distributions, not raw logits: both similarity matrices
    // then live on the same [0, 1] cosine scale as the mask side, and the
    // log of the signed means operates away from its clamp
    let dense_probs = g.softmax(dense, 0)?;
    let dense_in = g.gather_spatial(dense_probs, &sets.inward)?;
    let dense_out = g.gather_spatial(dense_probs, &sets.outward)?;
    let mask_in = anchor_points(pseudo_mask, &sets.inward)?;
    let mask_out = anchor_points(pseudo_mask, &sets.outward)?;
    let beacon = beacon_loss(g, dense_in, dense_out, &mask_in, &mask_out, cfg.tau, 1e-8)?;
    let weighted_beacon = g.mul_scalar(beacon.loss, cfg.lambda);
    let total = g.add(ce, weighted_beacon)?;
    Ok(SegLoss {
        total,
        ce,
        beacon: Some(beacon),
        sets: Some(sets),
    })
}
