//! Segmentation metrics: per-class intersection-over-union and a
//! tolerance-based boundary F-score.

use serde::{Deserialize, Serialize};

use super::{invalid, Result};
use crate::boundary::ClassMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU per class index; None when the class never occurs in predictions
    /// or ground truth across the whole split.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// IoU per class (background included) accumulated over the split; classes
/// absent from both prediction and ground truth everywhere are excluded
/// from the mean.
pub fn evaluate_miou(
    predictions: &[ClassMap],
    gt_masks: &[ClassMap],
    num_classes: usize,
) -> Result<MiouReport> {
    if predictions.len() != gt_masks.len() || predictions.is_empty() {
        return Err(invalid(
            "evaluate_miou",
            format!("{} predictions vs {} masks", predictions.len(), gt_masks.len()),
        ));
    }
    let mut intersection = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (pred, gt) in predictions.iter().zip(gt_masks) {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(invalid("evaluate_miou", "prediction and mask extents differ"));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p as usize, g as usize);
            if p >= num_classes || g >= num_classes {
                return Err(invalid("evaluate_miou", format!("class id out of range: {p}/{g}")));
            }
            if p == g {
                intersection[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[g] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            if union[c] == 0 {
                None
            } else {
                Some(intersection[c] as f64 / union[c] as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
    Ok(MiouReport { per_class, mean })
}

/// Boundary pixels: any pixel with a 4-neighbour of a different class.
pub fn boundary_pixels(map: &ClassMap) -> Vec<bool> {
    let (h, w) = (map.height, map.width);
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let v = map.at(r, c);
            let differs = (r > 0 && map.at(r - 1, c) != v)
                || (r + 1 < h && map.at(r + 1, c) != v)
                || (c > 0 && map.at(r, c - 1) != v)
                || (c + 1 < w && map.at(r, c + 1) != v);
            if differs {
                out[r * w + c] = true;
            }
        }
    }
    out
}

/// Pixels within Chebyshev distance `tol` of any set pixel, via 8-connected
/// multi-source BFS (chessboard distance equals BFS depth on the
/// 8-neighbourhood).
fn within_chebyshev(set: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let mut dist = vec![usize::MAX; h * w];
    let mut frontier: Vec<usize> = Vec::new();
    for (i, &b) in set.iter().enumerate() {
        if b {
            dist[i] = 0;
            frontier.push(i);
        }
    }
    for d in 1..=tol {
        let mut next = Vec::new();
        for &i in &frontier {
            let (r, c) = (i / w, i % w);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let ni = nr as usize * w + nc as usize;
                    if dist[ni] > d {
                        dist[ni] = d;
                        next.push(ni);
                    }
                }
            }
        }
        frontier = next;
    }
    dist.iter().map(|&d| d <= tol).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryFReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Scenes whose ground truth had no boundary are excluded.
    pub scenes_scored: usize,
}

/// Precision and recall of predicted boundary pixels against ground-truth
/// boundary pixels matched within Chebyshev distance `tolerance_px`, counts
/// pooled over scenes that have a ground-truth boundary.
pub fn evaluate_boundary_f(
    predictions: &[ClassMap],
    gt_masks: &[ClassMap],
    tolerance_px: usize,
) -> Result<BoundaryFReport> {
    if predictions.len() != gt_masks.len() || predictions.is_empty() {
        return Err(invalid(
            "evaluate_boundary_f",
            format!("{} predictions vs {} masks", predictions.len(), gt_masks.len()),
        ));
    }
    let mut pred_total = 0u64;
    let mut pred_matched = 0u64;
    let mut gt_total = 0u64;
    let mut gt_matched = 0u64;
    let mut scenes_scored = 0;
    for (pred, gt) in predictions.iter().zip(gt_masks) {
        let (h, w) = (gt.height, gt.width);
        let gt_b = boundary_pixels(gt);
        if !gt_b.iter().any(|&b| b) {
            continue;
        }
        scenes_scored += 1;
        let pred_b = boundary_pixels(pred);
        let near_gt = within_chebyshev(&gt_b, h, w, tolerance_px);
        let near_pred = within_chebyshev(&pred_b, h, w, tolerance_px);
        for i in 0..h * w {
            if pred_b[i] {
                pred_total += 1;
                if near_gt[i] {
                    pred_matched += 1;
                }
            }
            if gt_b[i] {
                gt_total += 1;
                if near_pred[i] {
                    gt_matched += 1;
                }
            }
        }
    }
    if scenes_scored == 0 {
        return Err(invalid(
            "evaluate_boundary_f",
            "no scene has a ground-truth boundary",
        ));
    }
    let precision = if pred_total == 0 {
        0.0
    } else {
        pred_matched as f64 / pred_total as f64
    };
    let recall = gt_matched as f64 / gt_total as f64;
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BoundaryFReport {
        precision,
        recall,
        f_score,
        scenes_scored,
    })
}
