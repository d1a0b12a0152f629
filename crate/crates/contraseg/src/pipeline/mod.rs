//! Synthetic data, two-stage training orchestration, pseudo-mask export,
//! and evaluation.

pub mod data;
pub mod decoder;
pub mod eval;
pub mod masks;
pub mod train;

pub use data::{generate_dataset, read_dataset, write_dataset, SceneSpec, SyntheticScene};
pub use decoder::{decoder_forward, DecoderConfig, DecoderParams};
pub use eval::{evaluate_boundary_f, evaluate_miou, BoundaryFReport, MiouReport};
pub use masks::{export_pseudo_masks, load_pseudo_masks, save_pseudo_masks, PseudoMask};
pub use train::{
    train_decoder, train_encoder, DecoderRecord, DecoderTrainScene, EncoderRecord, LossFlags,
    Sgd, SgdConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::BoundaryError;
use crate::encoder::EncoderError;
use crate::losses::{LossError, SinkhornConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image file: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Training hyper-parameters shared by both stages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Polynomial decay exponent: lr_t = lr * (1 - t/T)^power.
    pub poly_power: f64,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub grad_clip: f64,
    pub encoder_steps: usize,
    pub decoder_steps: usize,
    /// Full-image extent used for classification and image-level contrast.
    pub resize_size: usize,
    /// Random-crop extent for pixel and regional contrast; must be smaller
    /// than `resize_size`.
    pub crop_size: usize,
    /// Inference scales for multi-scale pseudo-mask export.
    pub scales: Vec<f64>,
    pub seed: u64,
    pub focal_gamma: f64,
    /// Dynamic patches drawn per step for regional contrast.
    pub dynamic_patches: usize,
    pub sinkhorn: SinkhornConfig,
    pub flags: LossFlags,
    /// Worker threads for batch elements; 0 uses all cores. Any value gives
    /// bitwise-identical results: per-element work is independent and the
    /// reduction order is fixed.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.02,
            momentum: 0.9,
            poly_power: 0.9,
            grad_clip: 5.0,
            encoder_steps: 2000,
            decoder_steps: 800,
            resize_size: 64,
            crop_size: 32,
            scales: vec![0.5, 1.0, 1.5, 2.0],
            seed: 0,
            focal_gamma: 2.0,
            dynamic_patches: 3,
            sinkhorn: SinkhornConfig {
                epsilon: 0.01,
                max_iters: 60,
                tolerance: 1e-4,
            },
            flags: LossFlags::default(),
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("train_config", "batch size must be positive"));
        }
        if self.crop_size >= self.resize_size {
            return Err(invalid(
                "train_config",
                format!(
                    "crop extent {} must be smaller than resize extent {}",
                    self.crop_size, self.resize_size
                ),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(invalid("train_config", "learning rate must be positive"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s <= 0.0) {
            return Err(invalid("train_config", "scales must be positive"));
        }
        Ok(())
    }
}

/// Stable per-purpose stream derivation so draws are independent of
/// evaluation order (splitmix64 over the combined words).
pub(crate) fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut z = base;
    for &w in words {
        z ^= w.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Plain crop of a [C x H x W] tensor.
pub(crate) fn crop_tensor3(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(top + h <= th && left + w <= tw, "crop outside tensor");
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for dy in 0..h {
            let s = (ch * th + top + dy) * tw + left;
            data.extend_from_slice(&t.data()[s..s + w]);
        }
    }
    Tensor::new(&[c, h, w], data).expect("sizes agree")
}
