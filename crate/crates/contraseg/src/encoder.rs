//! Convolutional classification encoder with class activation maps, the
//! spatial attention transform applied to them, and background estimation.

use std::collections::BTreeMap;
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{read_tensor_from, write_tensor_to, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error("encoder input: expected {expected:?}, got {got:?}")]
    InputExtent {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Architecture of the classification encoder. Stride-2-ish stages of
/// 3x3 convolutions followed by a 1x1 head producing one response map per
/// foreground class.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Channel width per stage.
    pub widths: Vec<usize>,
    /// Stride per stage. The final stage keeps stride 1 so that small crops
    /// still produce a feature grid of at least 4x4.
    pub strides: Vec<usize>,
    /// Foreground class count K (the background channel is estimated, not
    /// predicted).
    pub num_foreground_classes: usize,
    /// Expected input extent (height, width).
    pub input_size: (usize, usize),
    /// Add the attention output back onto its input instead of replacing it.
    pub sam_residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 1],
            num_foreground_classes: 4,
            input_size: (64, 64),
            sam_residual: false,
        }
    }
}

/// Feature-grid extent after the stage convolutions (3x3, padding 1).
fn staged_extent(mut e: usize, strides: &[usize]) -> usize {
    for &s in strides {
        e = (e + 2 - 3) / s + 1;
    }
    e
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    /// Feature dimensionality of the last stage.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Spatial extent of the feature grid for a given input extent.
    pub fn grid_extent(&self, input: (usize, usize)) -> (usize, usize) {
        (
            staged_extent(input.0, &self.strides),
            staged_extent(input.1, &self.strides),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(EncoderError::Config("no stages".into()));
        }
        if self.widths.len() != self.strides.len() {
            return Err(EncoderError::Config(format!(
                "{} widths but {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) || self.widths.iter().any(|&w| w == 0) {
            return Err(EncoderError::Config("zero width or stride".into()));
        }
        if self.num_foreground_classes < 1 {
            return Err(EncoderError::Config(
                "need at least one foreground class".into(),
            ));
        }
        let (gh, gw) = self.grid_extent(self.input_size);
        if gh < 4 || gw < 4 {
            return Err(EncoderError::Config(format!(
                "feature grid {gh}x{gw} below the required 4x4 for input {:?}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Same architecture validated against a different input extent
    /// (random crops, rescaled inference inputs).
    pub fn with_input_size(&self, input: (usize, usize)) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.input_size = input;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The three 1x1 projections of the attention block, stored as
/// [channels x channels] matrices acting on the flattened spatial axis.
#[derive(Debug, Clone)]
pub struct SamParams {
    pub g1: Tensor,
    pub g2: Tensor,
    pub g3: Tensor,
}

impl SamParams {
    /// Identity initialisation: the attention block starts out as a
    /// content-weighted smoothing of its input.
    pub fn identity(channels: usize) -> Self {
        let mut eye = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            eye.data_mut()[i * channels + i] = 1.0;
        }
        let eye = eye.with_grad();
        Self {
            g1: eye.clone(),
            g2: eye.clone(),
            g3: eye,
        }
    }
}

/// All trainable encoder tensors.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    /// Stage conv weights, each [out_ch x in_ch x 3 x 3].
    pub stages: Vec<Tensor>,
    /// Classification head, [K x D x 1 x 1].
    pub head: Tensor,
    pub sam: SamParams,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.num_stages());
        let mut in_ch = 3;
        for &out_ch in &cfg.widths {
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            stages.push(Tensor::randn(&[out_ch, in_ch, 3, 3], std, rng).with_grad());
            in_ch = out_ch;
        }
        let d = cfg.feature_dim();
        let head_std = (2.0 / d as f64).sqrt();
        let head =
            Tensor::randn(&[cfg.num_foreground_classes, d, 1, 1], head_std, rng).with_grad();
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            head,
            sam: SamParams::identity(cfg.num_foreground_classes),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("stage{i}.weight"), t))
            .collect();
        out.push(("head.weight".into(), &self.head));
        out.push(("sam.g1".into(), &self.sam.g1));
        out.push(("sam.g2".into(), &self.sam.g2));
        out.push(("sam.g3".into(), &self.sam.g3));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.stages.iter_mut().collect();
        out.push(&mut self.head);
        out.push(&mut self.sam.g1);
        out.push(&mut self.sam.g2);
        out.push(&mut self.sam.g3);
        out
    }

    /// Insert every parameter as a graph leaf, in `named()` order.
    pub fn vars(&self, g: &mut Graph) -> EncoderVars {
        EncoderVars {
            stages: self.stages.iter().map(|t| g.leaf(t)).collect(),
            head: g.leaf(&self.head),
            sam: SamVars {
                g1: g.leaf(&self.sam.g1),
                g2: g.leaf(&self.sam.g2),
                g3: g.leaf(&self.sam.g3),
            },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(
            &dir.join("weights.bin"),
            &dir.join("weights.json"),
            &self.named(),
        )
    }

    pub fn load(cfg: &EncoderConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let mut entries = load_checkpoint(&dir.join("weights.bin"), &dir.join("weights.json"))?;
        let mut take = |name: &str| -> Result<Tensor> {
            entries
                .remove(name)
                .map(|t| t.with_grad())
                .ok_or_else(|| EncoderError::Checkpoint(format!("missing tensor {name}")))
        };
        let stages = (0..cfg.num_stages())
            .map(|i| take(&format!("stage{i}.weight")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            head: take("head.weight")?,
            sam: SamParams {
                g1: take("sam.g1")?,
                g2: take("sam.g2")?,
                g3: take("sam.g3")?,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct SamVars {
    pub g1: Var,
    pub g2: Var,
    pub g3: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub stages: Vec<Var>,
    pub head: Var,
    pub sam: SamVars,
}

impl EncoderVars {
    /// Flat view in the same order as `EncoderParams::tensors_mut`.
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.stages.clone();
        out.push(self.head);
        out.push(self.sam.g1);
        out.push(self.sam.g2);
        out.push(self.sam.g3);
        out
    }
}

/// Forward outputs: per-class response maps, their pooled logits, and the
/// last-stage feature map.
#[derive(Debug, Clone, Copy)]
pub struct CamVars {
    /// [K x h x w]
    pub cam: Var,
    /// [K], the spatial mean of each response map
    pub logits: Var,
    /// [D x h x w]
    pub features: Var,
}

/// Post-activation output of every encoder stage, [1 x w_i x h_i x w_i]
/// each, for decoders that tap intermediate resolutions.
pub fn encoder_stages(
    g: &mut Graph,
    image: Var,
    params: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Vec<Var>> {
    let shape = g.shape(image).to_vec();
    let expected = vec![3, cfg.input_size.0, cfg.input_size.1];
    if shape != expected {
        return Err(EncoderError::InputExtent {
            expected,
            got: shape,
        });
    }
    let mut x = g.reshape(image, &[1, 3, cfg.input_size.0, cfg.input_size.1])?;
    let mut stages = Vec::with_capacity(params.stages.len());
    for (w, &stride) in params.stages.iter().zip(&cfg.strides) {
        let c = g.conv2d(x, *w, stride, 1)?;
        // leaky so a bad update cannot silence a whole stage for good
        x = g.leaky_relu(c, 0.1);
        stages.push(x);
    }
    Ok(stages)
}

/// Runs the encoder on one image [3 x H x W]. The logits are by construction
/// the spatial average of the returned response maps.
pub fn encoder_forward(
    g: &mut Graph,
    image: Var,
    params: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<CamVars> {
    let stages = encoder_stages(g, image, params, cfg)?;
    let x = *stages.last().expect("validated non-empty");
    let fshape = g.shape(x).to_vec();
    let (d, gh, gw) = (fshape[1], fshape[2], fshape[3]);
    let cam4 = g.conv2d(x, params.head, 1, 0)?;
    let k = cfg.num_foreground_classes;
    let cam = g.reshape(cam4, &[k, gh, gw])?;
    let flat = g.reshape(cam, &[k, gh * gw])?;
    let logits = g.mean_axis(flat, 1)?;
    let features = g.reshape(x, &[d, gh, gw])?;
    Ok(CamVars {
        cam,
        logits,
        features,
    })
}

/// Global self-attention over the flattened spatial axis of m [C x h x w]:
/// softmax(g1(m)ᵀ g2(m)) applied to g3(m). The softmax runs over source
/// positions, so each output position is a convex combination of g3(m)
/// columns.
pub fn sam_forward(g: &mut Graph, m: Var, sam: &SamVars, residual: bool) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "sam_forward",
            expected: 3,
            shape,
        }
        .into());
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mf = g.reshape(m, &[c, h * w])?;
    let q = g.matmul(sam.g1, mf)?;
    let k = g.matmul(sam.g2, mf)?;
    let v = g.matmul(sam.g3, mf)?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(qt, k)?;
    let attn = g.softmax(scores, 1)?;
    let attn_t = g.transpose(attn)?;
    let out_flat = g.matmul(v, attn_t)?;
    let out = g.reshape(out_flat, &[c, h, w])?;
    if residual {
        Ok(g.add(m, out)?)
    } else {
        Ok(out)
    }
}

/// Normalises the foreground response maps with a per-pixel channel softmax
/// and appends an estimated background channel 1 - max over the normalised
/// foreground channels. Input [C-1 x h x w], output [C x h x w].
pub fn background_map(g: &mut Graph, cam: Var) -> Result<Var> {
    let shape = g.shape(cam).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "background_map",
            expected: 3,
            shape,
        }
        .into());
    }
    let (h, w) = (shape[1], shape[2]);
    let norm = g.softmax(cam, 0)?;
    let mx = g.max_axis(norm, 0)?;
    let negmx = g.neg(mx);
    let bg = g.add_scalar(negmx, 1.0);
    let bg = g.reshape(bg, &[1, h, w])?;
    Ok(g.concat(&[norm, bg], 0)?)
}

/// Inference outputs on plain tensors.
pub struct CamOutput {
    pub cam: Tensor,
    pub logits: Tensor,
    pub features: Tensor,
}

/// Convenience inference entry point, no gradients kept.
pub fn encoder_infer(params: &EncoderParams, image: &Tensor) -> Result<CamOutput> {
    let mut g = Graph::new();
    let img = g.constant(image);
    let vars = frozen_vars(&mut g, params);
    let cfg = params.cfg.with_input_size((
        image.shape().get(1).copied().unwrap_or(0),
        image.shape().get(2).copied().unwrap_or(0),
    ))?;
    let out = encoder_forward(&mut g, img, &vars, &cfg)?;
    Ok(CamOutput {
        cam: g.detach(out.cam),
        logits: g.detach(out.logits),
        features: g.detach(out.features),
    })
}

/// Parameter leaves with gradients disabled, for inference-only graphs.
pub fn frozen_vars(g: &mut Graph, params: &EncoderParams) -> EncoderVars {
    EncoderVars {
        stages: params.stages.iter().map(|t| g.constant(t)).collect(),
        head: g.constant(&params.head),
        sam: SamVars {
            g1: g.constant(&params.sam.g1),
            g2: g.constant(&params.sam.g2),
            g3: g.constant(&params.sam.g3),
        },
    }
}

// ── checkpoint container ─────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    offset: u64,
    shape: Vec<usize>,
}

/// Writes named tensors into one binary file of concatenated tensor
/// containers plus a JSON manifest mapping name -> (byte offset, shape).
pub fn save_checkpoint(
    bin_path: &Path,
    manifest_path: &Path,
    entries: &[(String, &Tensor)],
) -> Result<()> {
    let mut bin = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    let mut manifest = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in entries {
        manifest.insert(
            name.clone(),
            ManifestEntry {
                offset,
                shape: t.shape().to_vec(),
            },
        );
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, t)?;
        bin.write_all(&buf)?;
        offset += buf.len() as u64;
    }
    bin.flush()?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path, json)?;
    Ok(())
}

pub fn load_checkpoint(bin_path: &Path, manifest_path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let mut bin = std::io::BufReader::new(std::fs::File::open(bin_path)?);
    let mut out = BTreeMap::new();
    for (name, entry) in manifest {
        bin.seek(SeekFrom::Start(entry.offset))?;
        let t = read_tensor_from(&mut bin)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(EncoderError::Checkpoint(format!(
                "{name}: manifest shape {:?} but container holds {:?}",
                entry.shape,
                t.shape()
            )));
        }
        out.insert(name, t);
    }
    Ok(out)
}
