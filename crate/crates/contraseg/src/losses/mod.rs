//! Stage-1 loss strategies: image-level contrast over batch embeddings,
//! pixel-level contrast over overlapping crops, pairwise regional contrast
//! through entropic transport, and the hybrid classification loss, summed
//! into the total encoder objective.

mod prc;
mod sinkhorn;

pub use prc::{
    dynamic_patch_rects, marginal_weights, prc_loss, sample_dynamic_rects, static_patch_rects,
    PatchConfig, PrcLoss,
};
pub use sinkhorn::{sinkhorn_emd, sinkhorn_emd_weights, SinkhornConfig, SinkhornResult};

use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn invalid(op: &'static str, msg: impl Into<String>) -> LossError {
    LossError::Invalid {
        op,
        msg: msg.into(),
    }
}

// ── image-level contrast ─────────────────────────────────────────────

/// Pooled image embeddings with their multi-hot labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// [B x D]
    pub embeddings: Tensor,
    /// [B x K], entries in {0, 1}
    pub labels: Tensor,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || labels.rank() != 2 {
            return Err(invalid("embedding_batch", "embeddings and labels must be rank 2"));
        }
        if embeddings.shape()[0] != labels.shape()[0] || embeddings.shape()[0] == 0 {
            return Err(invalid(
                "embedding_batch",
                format!(
                    "batch mismatch: {:?} embeddings vs {:?} labels",
                    embeddings.shape(),
                    labels.shape()
                ),
            ));
        }
        let k = labels.shape()[1];
        for (i, row) in labels.data().chunks(k).enumerate() {
            if !row.iter().any(|&v| v == 1.0) {
                return Err(invalid(
                    "embedding_batch",
                    format!("labels row {i} has no foreground class"),
                ));
            }
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(invalid("embedding_batch", format!("labels row {i} not multi-hot")));
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.embeddings.shape()[0]
    }
}

/// Positive pairs share the exact label set; negative pairs share no class.
/// Pairs that are neither (partial overlap) contribute to no term.
#[derive(Debug, Clone)]
pub struct PairMask {
    pub positive: Vec<Vec<bool>>,
    pub negative: Vec<Vec<bool>>,
}

impl PairMask {
    pub fn from_labels(labels: &Tensor) -> Result<Self> {
        if labels.rank() != 2 {
            return Err(invalid("pair_mask", "labels must be [B x K]"));
        }
        let (b, k) = (labels.shape()[0], labels.shape()[1]);
        let row = |i: usize| &labels.data()[i * k..(i + 1) * k];
        let mut positive = vec![vec![false; b]; b];
        let mut negative = vec![vec![false; b]; b];
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let (ri, rj) = (row(i), row(j));
                positive[i][j] = ri == rj;
                negative[i][j] = ri.iter().zip(rj).all(|(&a, &b)| a * b == 0.0);
            }
        }
        Ok(Self { positive, negative })
    }

    pub fn has_positive(&self, query: usize) -> bool {
        self.positive[query].iter().any(|&p| p)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImcConfig {
    /// L2-normalise embeddings before the dot products so exp() stays in a
    /// stable range. Off reproduces raw dot-product scores.
    pub normalize: bool,
    pub eps: f64,
}

impl Default for ImcConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImcLoss {
    pub loss: Var,
    /// Queries with at least one positive partner; the mean runs over these.
    pub valid_queries: usize,
    /// Set when no query had a positive partner and the loss is a plain 0.
    pub no_valid_query: bool,
}

/// Batch contrastive loss over pooled image embeddings: for each query, the
/// summed positive-pair scores sit inside the log against positives plus
/// negatives, and queries without positive partners are skipped.
pub fn imc_loss(
    g: &mut Graph,
    embeddings: Var,
    mask: &PairMask,
    cfg: &ImcConfig,
) -> Result<ImcLoss> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(invalid("imc_loss", format!("embeddings must be [B x D], got {shape:?}")));
    }
    let b = shape[0];
    if mask.positive.len() != b {
        return Err(invalid(
            "imc_loss",
            format!("pair mask built for batch {} but embeddings have {b}", mask.positive.len()),
        ));
    }

    let valid: Vec<bool> = (0..b).map(|i| mask.has_positive(i)).collect();
    let valid_queries = valid.iter().filter(|&&v| v).count();
    if valid_queries == 0 {
        return Ok(ImcLoss {
            loss: g.scalar(0.0),
            valid_queries: 0,
            no_valid_query: true,
        });
    }

    let z = if cfg.normalize {
        g.l2_normalize_rows(embeddings, cfg.eps)?
    } else {
        embeddings
    };
    let zt = g.transpose(z)?;
    let scores = g.matmul(z, zt)?;
    let escores = g.exp(scores);

    let to_mask = |m: &Vec<Vec<bool>>| {
        let mut t = Tensor::zeros(&[b, b]);
        for i in 0..b {
            for j in 0..b {
                if m[i][j] {
                    t.data_mut()[i * b + j] = 1.0;
                }
            }
        }
        t
    };
    let pos_mask = g.constant(&to_mask(&mask.positive));
    let neg_mask = g.constant(&to_mask(&mask.negative));

    let pos_terms = g.mul(escores, pos_mask)?;
    let neg_terms = g.mul(escores, neg_mask)?;
    let pos_sum = g.sum_axis(pos_terms, 1)?;
    let neg_sum = g.sum_axis(neg_terms, 1)?;

    // Invalid queries would produce 0/0; give them denominator 1 and mask
    // them out of the mean so they contribute neither value nor gradient.
    let invalid_bonus = Tensor::new(
        &[b],
        valid.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect(),
    )
    .expect("length matches");
    let bonus = g.constant(&invalid_bonus);
    let denom_raw = g.add(pos_sum, neg_sum)?;
    let denom = g.add(denom_raw, bonus)?;
    let ratio = g.div(pos_sum, denom)?;
    let logr = g.log(ratio);
    let neg_log = g.neg(logr);

    let valid_t = Tensor::new(
        &[b],
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )
    .expect("length matches");
    let valid_v = g.constant(&valid_t);
    let masked = g.mul(neg_log, valid_v)?;
    let total = g.sum_all(masked);
    let loss = g.mul_scalar(total, 1.0 / valid_queries as f64);
    Ok(ImcLoss {
        loss,
        valid_queries,
        no_valid_query: false,
    })
}

// ── hybrid classification loss ───────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct HclLoss {
    pub total: Var,
    pub bce: Var,
    pub focal: Var,
    pub pair: Var,
}

/// Multi-label classification loss: mean sigmoid BCE, focal term with
/// focusing parameter `gamma`, and a pairwise ranking term
/// log(1 + Σ⁺Σ⁻ exp(s⁻ - s⁺)) averaged over the batch.
pub fn hcl_loss(g: &mut Graph, logits: Var, labels: &Tensor, gamma: f64) -> Result<HclLoss> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || labels.shape() != shape.as_slice() {
        return Err(invalid(
            "hcl_loss",
            format!("logits {shape:?} vs labels {:?}", labels.shape()),
        ));
    }
    if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("hcl_loss", "labels must be 0/1"));
    }
    let b = shape[0];
    let y = g.constant(labels);

    // bce(x, y) = relu(x) - x*y + log(1 + exp(-|x|)), elementwise
    let relu_x = g.relu(logits);
    let neg_x = g.neg(logits);
    let relu_negx = g.relu(neg_x);
    let abs_x = g.add(relu_x, relu_negx)?;
    let neg_abs = g.neg(abs_x);
    let e = g.exp(neg_abs);
    let e1 = g.add_scalar(e, 1.0);
    let log1p = g.log(e1);
    let xy = g.mul(logits, y)?;
    let lin = g.sub(relu_x, xy)?;
    let bce_elem = g.add(lin, log1p)?;
    let bce = g.mean_all(bce_elem);

    // focal: (1 - p_t)^gamma * (-log p_t), p_t = p if y=1 else 1-p
    let p = g.sigmoid(logits);
    let sign = {
        let data: Vec<f64> = labels.data().iter().map(|&v| 2.0 * v - 1.0).collect();
        let t = Tensor::new(&shape, data).expect("shape matches");
        g.constant(&t)
    };
    let offset = {
        let data: Vec<f64> = labels.data().iter().map(|&v| 1.0 - v).collect();
        let t = Tensor::new(&shape, data).expect("shape matches");
        g.constant(&t)
    };
    let ps = g.mul(p, sign)?;
    let pt = g.add(ps, offset)?;
    let neg_pt = g.neg(pt);
    let one_minus_pt = g.add_scalar(neg_pt, 1.0);
    let weight = g.powf(one_minus_pt, gamma);
    let log_pt = g.log(pt);
    let neg_log_pt = g.neg(log_pt);
    let focal_elem = g.mul(weight, neg_log_pt)?;
    let focal = g.mean_all(focal_elem);

    // pair: log(1 + (Σ_neg e^x)(Σ_pos e^-x)) per sample; samples with no
    // positives or no negatives have an empty sum and contribute log 1 = 0.
    let not_y = {
        let data: Vec<f64> = labels.data().iter().map(|&v| 1.0 - v).collect();
        let t = Tensor::new(&shape, data).expect("shape matches");
        g.constant(&t)
    };
    let ex = g.exp(logits);
    let enx = g.exp(neg_x);
    let neg_scores = g.mul(ex, not_y)?;
    let pos_scores = g.mul(enx, y)?;
    let s_neg = g.sum_axis(neg_scores, 1)?;
    let s_pos = g.sum_axis(pos_scores, 1)?;
    let prod = g.mul(s_neg, s_pos)?;
    let prod1 = g.add_scalar(prod, 1.0);
    let pair_rows = g.log(prod1);
    let pair_sum = g.sum_all(pair_rows);
    let pair = g.mul_scalar(pair_sum, 1.0 / b as f64);

    let bf = g.add(bce, focal)?;
    let total = g.add(bf, pair)?;
    Ok(HclLoss {
        total,
        bce,
        focal,
        pair,
    })
}

// ── pixel-level contrast over crop overlaps ──────────────────────────

/// Axis-aligned rectangle in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let top = self.top.max(other.top);
        let left = self.left.max(other.left);
        let bottom = self.bottom().min(other.bottom());
        let right = self.right().min(other.right());
        if bottom <= top || right <= left {
            return None;
        }
        Some(Rect {
            top,
            left,
            height: bottom - top,
            width: right - left,
        })
    }
}

/// Two crops of the same image. Crop offsets and extents are expected to be
/// aligned to the encoder's downsampling factor so the overlap maps onto
/// whole feature cells in both crops' grids.
#[derive(Debug, Clone, Copy)]
pub struct CropPair {
    pub rect_a: Rect,
    pub rect_b: Rect,
}

impl CropPair {
    pub fn overlap(&self) -> Option<Rect> {
        self.rect_a.intersect(&self.rect_b)
    }

    /// The overlap window expressed in each crop's feature grid, or None when
    /// the crops do not overlap by at least one whole cell. Both windows have
    /// identical extents.
    pub fn grid_windows(&self, downsample: usize) -> Option<(Rect, Rect)> {
        let ov = self.overlap()?;
        let win = |crop: &Rect| -> Option<Rect> {
            let local_top = ov.top - crop.top;
            let local_left = ov.left - crop.left;
            let t0 = local_top.div_ceil(downsample);
            let l0 = local_left.div_ceil(downsample);
            let t1 = (local_top + ov.height) / downsample;
            let l1 = (local_left + ov.width) / downsample;
            if t1 <= t0 || l1 <= l0 {
                return None;
            }
            Some(Rect {
                top: t0,
                left: l0,
                height: t1 - t0,
                width: l1 - l0,
            })
        };
        let wa = win(&self.rect_a)?;
        let wb = win(&self.rect_b)?;
        if wa.height != wb.height || wa.width != wb.width {
            // misaligned crops cover different whole-cell counts; callers
            // treat this like an empty overlap and redraw
            return None;
        }
        Some((wa, wb))
    }
}

/// The four activation maps entering pixel contrast: the attention-processed
/// and raw response maps of each crop, all [C x gh x gw].
#[derive(Debug, Clone, Copy)]
pub struct PixcBranches {
    pub sam_a: Var,
    pub raw_a: Var,
    pub sam_b: Var,
    pub raw_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PixcLoss {
    pub loss: Var,
    /// Overlap had no whole feature cell; loss is a constant 0 and the
    /// sampler should redraw the crops.
    pub empty_overlap: bool,
}

/// Mean per-cell cosine between the channel vectors of two aligned maps.
fn cosine_map_mean(g: &mut Graph, u: Var, v: Var, eps: f64) -> Result<Var> {
    let prod = g.mul(u, v)?;
    let dot = g.sum_axis(prod, 0)?;
    let uu = g.mul(u, u)?;
    let vv = g.mul(v, v)?;
    let su = g.sum_axis(uu, 0)?;
    let sv = g.sum_axis(vv, 0)?;
    let su = g.clamp_min(su, eps * eps);
    let sv = g.clamp_min(sv, eps * eps);
    let nu = g.sqrt(su);
    let nv = g.sqrt(sv);
    let denom = g.mul(nu, nv)?;
    let cos = g.div(dot, denom)?;
    Ok(g.mean_all(cos))
}

/// Negative mean cosine between per-cell features of the two branches over
/// the crop overlap, stop-gradient on the raw target branch, symmetrised by
/// swapping which crop plays the online role.
pub fn pixc_loss(
    g: &mut Graph,
    branches: &PixcBranches,
    pair: &CropPair,
    downsample: usize,
    eps: f64,
) -> Result<PixcLoss> {
    let Some((wa, wb)) = pair.grid_windows(downsample) else {
        return Ok(PixcLoss {
            loss: g.scalar(0.0),
            empty_overlap: true,
        });
    };
    let crop = |g: &mut Graph, v: Var, w: &Rect| -> Result<Var> {
        Ok(g.crop_spatial(v, w.top, w.left, w.height, w.width)?)
    };
    let ua = crop(g, branches.sam_a, &wa)?;
    let vb = crop(g, branches.raw_b, &wb)?;
    let vb = g.stop_gradient(vb);
    let m1 = cosine_map_mean(g, ua, vb, eps)?;

    let ub = crop(g, branches.sam_b, &wb)?;
    let va = crop(g, branches.raw_a, &wa)?;
    let va = g.stop_gradient(va);
    let m2 = cosine_map_mean(g, ub, va, eps)?;

    let s = g.add(m1, m2)?;
    let loss = g.mul_scalar(s, -0.5);
    Ok(PixcLoss {
        loss,
        empty_overlap: false,
    })
}

// ── overall objective ────────────────────────────────────────────────

/// Unweighted sum of the four component losses.
pub fn mcl_loss(g: &mut Graph, hcl: Var, imc: Var, pixc: Var, prc: Var) -> Result<Var> {
    let a = g.add(hcl, imc)?;
    let b = g.add(a, pixc)?;
    Ok(g.add(b, prc)?)
}
