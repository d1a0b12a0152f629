//! Segmentation head: two bilinear-upsample + conv blocks with skip
//! connections from the encoder stages, then a 1x1 projection to C classes
//! at full image resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{invalid, Result};
use crate::encoder::{encoder_stages, save_checkpoint, EncoderConfig, EncoderVars};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// Channel widths of the two refinement blocks.
    pub mid_widths: (usize, usize),
    /// Update encoder weights during stage-2 training (off freezes them).
    pub finetune_encoder: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            mid_widths: (48, 24),
            finetune_encoder: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    /// [m1 x (d_last + d_skip1) x 3 x 3]
    pub block1: Tensor,
    /// [m2 x (m1 + d_skip0) x 3 x 3]
    pub block2: Tensor,
    /// [C x m2 x 1 x 1]
    pub head: Tensor,
}

impl DecoderParams {
    pub fn init(
        enc: &EncoderConfig,
        cfg: &DecoderConfig,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if enc.num_stages() < 3 {
            return Err(invalid(
                "decoder",
                "decoder skip connections need at least 3 encoder stages",
            ));
        }
        let widths = &enc.widths;
        let in1 = widths[widths.len() - 1] + widths[1];
        let in2 = cfg.mid_widths.0 + widths[0];
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        Ok(Self {
            cfg: cfg.clone(),
            block1: Tensor::randn(&[cfg.mid_widths.0, in1, 3, 3], he(in1 * 9), rng).with_grad(),
            block2: Tensor::randn(&[cfg.mid_widths.1, in2, 3, 3], he(in2 * 9), rng).with_grad(),
            head: Tensor::randn(
                &[num_classes, cfg.mid_widths.1, 1, 1],
                he(cfg.mid_widths.1),
                rng,
            )
            .with_grad(),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("decoder.block1".into(), &self.block1),
            ("decoder.block2".into(), &self.block2),
            ("decoder.head".into(), &self.head),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.block1, &mut self.block2, &mut self.head]
    }

    pub fn vars(&self, g: &mut Graph) -> DecoderVars {
        DecoderVars {
            block1: g.leaf(&self.block1),
            block2: g.leaf(&self.block2),
            head: g.leaf(&self.head),
        }
    }

    pub fn frozen_vars(&self, g: &mut Graph) -> DecoderVars {
        DecoderVars {
            block1: g.constant(&self.block1),
            block2: g.constant(&self.block2),
            head: g.constant(&self.head),
        }
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(
            &dir.join("decoder.bin"),
            &dir.join("decoder.json"),
            &self.named(),
        )?;
        Ok(())
    }

    pub fn load(
        enc: &EncoderConfig,
        cfg: &DecoderConfig,
        num_classes: usize,
        dir: &std::path::Path,
    ) -> Result<Self> {
        let mut entries = crate::encoder::load_checkpoint(
            &dir.join("decoder.bin"),
            &dir.join("decoder.json"),
        )?;
        let mut take = |name: &str| -> Result<Tensor> {
            entries
                .remove(name)
                .map(|t| t.with_grad())
                .ok_or_else(|| invalid("decoder", format!("checkpoint missing {name}")))
        };
        let out = Self {
            cfg: cfg.clone(),
            block1: take("decoder.block1")?,
            block2: take("decoder.block2")?,
            head: take("decoder.head")?,
        };
        let expect = Self::init(enc, cfg, num_classes, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for ((_, a), (_, b)) in out.named().iter().zip(expect.named().iter()) {
            if a.shape() != b.shape() {
                return Err(invalid(
                    "decoder",
                    format!("checkpoint shape {:?} does not fit config {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(out)
    }
}

use rand::SeedableRng;

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub block1: Var,
    pub block2: Var,
    pub head: Var,
}

impl DecoderVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.block1, self.block2, self.head]
    }
}

/// Full dense prediction [C x H x W] for one image [3 x H x W].
pub fn decoder_forward(
    g: &mut Graph,
    image: Var,
    enc_vars: &EncoderVars,
    enc_cfg: &EncoderConfig,
    dec_vars: &DecoderVars,
    num_classes: usize,
) -> Result<Var> {
    let (h, w) = (g.shape(image)[1], g.shape(image)[2]);
    let stages = encoder_stages(g, image, enc_vars, enc_cfg)?;
    let last = *stages.last().expect("non-empty");
    let skip1 = stages[1];
    let skip0 = stages[0];

    let s1_shape = g.shape(skip1).to_vec();
    let up1 = g.resize_bilinear(last, s1_shape[2], s1_shape[3])?;
    let cat1 = g.concat(&[up1, skip1], 1)?;
    let b1 = g.conv2d(cat1, dec_vars.block1, 1, 1)?;
    let b1 = g.leaky_relu(b1, 0.1);

    let s0_shape = g.shape(skip0).to_vec();
    let up2 = g.resize_bilinear(b1, s0_shape[2], s0_shape[3])?;
    let cat2 = g.concat(&[up2, skip0], 1)?;
    let b2 = g.conv2d(cat2, dec_vars.block2, 1, 1)?;
    let b2 = g.leaky_relu(b2, 0.1);

    let logits = g.conv2d(b2, dec_vars.head, 1, 0)?;
    let full = g.resize_bilinear(logits, h, w)?;
    Ok(g.reshape(full, &[num_classes, h, w])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderParams;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decoder_produces_full_resolution_logits() {
        let enc_cfg = EncoderConfig {
            widths: vec![4, 6, 8],
            strides: vec![2, 2, 1],
            num_foreground_classes: 2,
            input_size: (16, 16),
            sam_residual: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderParams::init(&enc_cfg, &mut rng).unwrap();
        let dec = DecoderParams::init(&enc_cfg, &DecoderConfig::default(), 3, &mut rng).unwrap();
        let image = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);

        let mut g = Graph::new();
        let img = g.constant(&image);
        let ev = crate::encoder::frozen_vars(&mut g, &enc);
        let dv = dec.frozen_vars(&mut g);
        let out = decoder_forward(&mut g, img, &ev, &enc_cfg, &dv, 3).unwrap();
        assert_eq!(g.shape(out), &[3, 16, 16]);
        assert!(g.value(out).is_finite());
    }

    #[test]
    fn decoder_gradients_reach_both_nets_when_finetuning() {
        let enc_cfg = EncoderConfig {
            widths: vec![4, 6, 8],
            strides: vec![2, 2, 1],
            num_foreground_classes: 2,
            input_size: (16, 16),
            sam_residual: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderParams::init(&enc_cfg, &mut rng).unwrap();
        let dec = DecoderParams::init(&enc_cfg, &DecoderConfig::default(), 3, &mut rng).unwrap();
        let image = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);

        let mut g = Graph::new();
        let img = g.constant(&image);
        let ev = enc.vars(&mut g);
        let dv = dec.vars(&mut g);
        let out = decoder_forward(&mut g, img, &ev, &enc_cfg, &dv, 3).unwrap();
        let loss = g.mean_all(out);
        g.backward(loss).unwrap();
        assert!(g.grad(dv.block1).is_some());
        assert!(g.grad(dv.head).is_some());
        assert!(g.grad(ev.stages[0]).is_some());
    }

    #[test]
    fn decoder_checkpoint_round_trip() {
        let enc_cfg = EncoderConfig {
            widths: vec![4, 6, 8],
            strides: vec![2, 2, 1],
            num_foreground_classes: 2,
            input_size: (16, 16),
            sam_residual: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = DecoderParams::init(&enc_cfg, &DecoderConfig::default(), 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dec.save(dir.path()).unwrap();
        let back = DecoderParams::load(&enc_cfg, &DecoderConfig::default(), 3, dir.path()).unwrap();
        assert_eq!(dec.block1.data(), back.block1.data());
        assert_eq!(dec.head.data(), back.head.data());
    }
}
