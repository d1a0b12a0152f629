//! Soft pseudo-mask export: background-included, attention-processed
//! response maps averaged over inference scales, renormalised per pixel,
//! and stored one tensor container per scene with a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{invalid, Result, SyntheticScene};
use crate::encoder::{background_map, encoder_forward, frozen_vars, sam_forward, EncoderParams};
use crate::tensor::{read_tensor, write_tensor, Graph, Tensor};

#[derive(Debug, Clone)]
pub struct PseudoMask {
    pub source_id: usize,
    /// [C x H x W], per-pixel distribution over background + foreground.
    pub soft: Tensor,
}

impl PseudoMask {
    /// Per-pixel channel sums must be 1 within the given tolerance.
    pub fn check_simplex(&self, tol: f64) -> bool {
        let (c, h, w) = (
            self.soft.shape()[0],
            self.soft.shape()[1],
            self.soft.shape()[2],
        );
        for i in 0..h * w {
            let mut sum = 0.0;
            for ch in 0..c {
                let v = self.soft.data()[ch * h * w + i];
                if v < -tol {
                    return false;
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return false;
            }
        }
        true
    }

    /// Hard class assignment (channel 0 is the background estimate; the
    /// returned map uses 0 = background, c = foreground class c).
    pub fn to_class_map(&self) -> crate::boundary::ClassMap {
        crate::boundary::ClassMap::from_argmax(&self.soft).expect("mask is [C x H x W]")
    }
}

/// One scale pass: resized input, encoder, attention, background inclusion,
/// upsampling back to full resolution.
fn single_scale_map(
    params: &EncoderParams,
    image: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let cfg = params.cfg.with_input_size((sh, sw)).map_err(|e| {
        invalid(
            "export_pseudo_masks",
            format!("scale {scale} gives unusable input {sh}x{sw}: {e}"),
        )
    })?;
    let mut g = Graph::new();
    let img = g.constant(image);
    let scaled = g.resize_bilinear(img, sh, sw)?;
    let vars = frozen_vars(&mut g, params);
    let out = encoder_forward(&mut g, scaled, &vars, &cfg)?;
    let attended = sam_forward(&mut g, out.cam, &vars.sam, cfg.sam_residual)?;
    let with_bg = background_map(&mut g, attended)?;
    let full = g.resize_bilinear(with_bg, h, w)?;
    Ok(g.detach(full))
}

/// Scale-averaged soft masks for every scene. Channel layout: foreground
/// classes first (matching the response-map order), background last; the
/// stored mask is reordered to put background at channel 0 so channel index
/// equals class id.
pub fn export_pseudo_masks(
    params: &EncoderParams,
    scenes: &[SyntheticScene],
    scales: &[f64],
) -> Result<Vec<PseudoMask>> {
    if scales.is_empty() {
        return Err(invalid("export_pseudo_masks", "need at least one scale"));
    }
    let k = params.cfg.num_foreground_classes;
    scenes
        .iter()
        .map(|scene| {
            let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
            let mut acc = Tensor::zeros(&[k + 1, h, w]);
            for &scale in scales {
                let m = single_scale_map(params, &scene.image, scale)?;
                for (a, &v) in acc.data_mut().iter_mut().zip(m.data()) {
                    *a += v;
                }
            }
            let inv = 1.0 / scales.len() as f64;
            for v in acc.data_mut() {
                *v *= inv;
            }
            // reorder [fg..., bg] -> [bg, fg...] and renormalise per pixel
            let mut soft = Tensor::zeros(&[k + 1, h, w]);
            let plane = h * w;
            soft.data_mut()[..plane].copy_from_slice(&acc.data()[k * plane..]);
            soft.data_mut()[plane..].copy_from_slice(&acc.data()[..k * plane]);
            for i in 0..plane {
                let mut sum = 0.0;
                for ch in 0..=k {
                    sum += soft.data()[ch * plane + i];
                }
                let inv = 1.0 / sum.max(1e-12);
                for ch in 0..=k {
                    soft.data_mut()[ch * plane + i] *= inv;
                }
            }
            Ok(PseudoMask {
                source_id: scene.id,
                soft,
            })
        })
        .collect()
}

// ── disk format ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    id: usize,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskManifest {
    masks: Vec<MaskEntry>,
}

pub fn save_pseudo_masks(dir: &Path, masks: &[PseudoMask]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(masks.len());
    for m in masks {
        let file = format!("pm_{:05}.bin", m.source_id);
        write_tensor(&dir.join(&file), &m.soft)?;
        entries.push(MaskEntry {
            id: m.source_id,
            file,
            shape: m.soft.shape().to_vec(),
        });
    }
    std::fs::write(
        dir.join("masks.json"),
        serde_json::to_string_pretty(&MaskManifest { masks: entries })?,
    )?;
    Ok(())
}

pub fn load_pseudo_masks(dir: &Path) -> Result<Vec<PseudoMask>> {
    let manifest: MaskManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("masks.json"))?)?;
    manifest
        .masks
        .into_iter()
        .map(|e| {
            let soft = read_tensor(&dir.join(&e.file))?;
            if soft.shape() != e.shape.as_slice() {
                return Err(invalid(
                    "load_pseudo_masks",
                    format!("{}: manifest {:?} vs container {:?}", e.file, e.shape, soft.shape()),
                ));
            }
            Ok(PseudoMask {
                source_id: e.id,
                soft,
            })
        })
        .collect()
}
