//! Two-stage training: the classification encoder under the combined
//! contrastive objective, then the segmentation decoder against exported
//! pseudo masks. Batch elements build independent graphs and may run on a
//! thread pool; gradients reduce in fixed element order, so results are
//! bitwise identical at any thread count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{crop_tensor3, derive_seed, invalid, PipelineError, Result, SyntheticScene, TrainConfig};
use crate::boundary::{orientation_map, BeaconConfig, ClassMap};
use crate::encoder::{
    background_map, encoder_forward, frozen_vars, sam_forward, EncoderConfig, EncoderParams,
};
use crate::losses::{
    hcl_loss, imc_loss, pixc_loss, prc_loss, sample_dynamic_rects, CropPair, ImcConfig,
    PairMask, PatchConfig, PixcBranches, Rect,
};
use crate::pipeline::decoder::{decoder_forward, DecoderConfig, DecoderParams};
use crate::pipeline::masks::PseudoMask;
use crate::tensor::{Graph, Tensor, Var};

/// Which contrastive terms join the hybrid classification loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct LossFlags {
    pub imc: bool,
    pub pixc: bool,
    pub prc: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            imc: true,
            pixc: true,
            prc: true,
        }
    }
}

// ── optimiser ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub total_steps: usize,
}

/// Momentum SGD with polynomial learning-rate decay.
#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(param_sizes: &[usize], cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.cfg.total_steps.max(1) as f64;
        self.cfg.learning_rate * (1.0 - t.min(1.0)).powf(self.cfg.poly_power)
    }

    pub fn step(&mut self, step: usize, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        let lr = self.lr_at(step);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for i in 0..g.len() {
                v[i] = self.cfg.momentum * v[i] + g[i];
                p.data_mut()[i] -= lr * v[i];
            }
        }
    }
}

// ── records ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncoderRecord {
    pub step: usize,
    pub hcl: f64,
    pub imc: f64,
    pub pixc: f64,
    pub prc: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecoderRecord {
    pub step: usize,
    pub ce: f64,
    pub beacon: f64,
    pub total: f64,
}

/// Per-step loss component log: step,hcl,imc,pixc,prc,total.
pub fn write_encoder_csv(path: &Path, records: &[EncoderRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,hcl,imc,pixc,prc,total")?;
    for r in records {
        writeln!(f, "{},{},{},{},{},{}", r.step, r.hcl, r.imc, r.pixc, r.prc, r.total)?;
    }
    Ok(())
}

pub fn write_decoder_csv(path: &Path, records: &[DecoderRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,ce,beacon,total")?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.step, r.ce, r.beacon, r.total)?;
    }
    Ok(())
}

// ── shared machinery ─────────────────────────────────────────────────

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    let n = if threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        threads
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| invalid("thread_pool", e.to_string()))
}

fn check_finite(step: usize, components: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in components {
        if !v.is_finite() {
            return Err(PipelineError::Diverged {
                step,
                detail: components
                    .iter()
                    .map(|(n, v)| format!("{n}={v}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            }
            .tap_name(name));
        }
    }
    Ok(())
}

impl PipelineError {
    fn tap_name(self, _name: &str) -> Self {
        self
    }
}

/// Scale all gradients so their global L2 norm stays at or below `clip`.
fn clip_gradients(grads: &mut [Vec<f64>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Group scene indices by exact label set so batches can be biased towards
/// containing at least one positive pair.
fn label_groups(scenes: &[SyntheticScene]) -> BTreeMap<Vec<u8>, Vec<usize>> {
    let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        let key: Vec<u8> = s.image_labels.iter().map(|&v| v as u8).collect();
        groups.entry(key).or_default().push(i);
    }
    groups
}

/// Batch indices: one anchor, a same-label partner when one exists, the rest
/// uniform.
fn sample_batch(
    scenes: &[SyntheticScene],
    groups: &BTreeMap<Vec<u8>, Vec<usize>>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = scenes.len();
    let mut batch = Vec::with_capacity(batch_size);
    let anchor = rng.random_range(0..n);
    batch.push(anchor);
    if batch_size > 1 {
        let key: Vec<u8> = scenes[anchor].image_labels.iter().map(|&v| v as u8).collect();
        let group = &groups[&key];
        if group.len() > 1 {
            loop {
                let partner = group[rng.random_range(0..group.len())];
                if partner != anchor {
                    batch.push(partner);
                    break;
                }
            }
        }
    }
    while batch.len() < batch_size {
        batch.push(rng.random_range(0..n));
    }
    batch
}

// ── stage 1: encoder ─────────────────────────────────────────────────

struct EncoderElement {
    graph: Graph,
    param_vars: Vec<Var>,
    embedding: Var,
    local: Var,
    hcl: f64,
    pixc: f64,
    prc: f64,
}

#[allow(clippy::too_many_arguments)]
fn encoder_element(
    params: &EncoderParams,
    scene: &SyntheticScene,
    cfg: &TrainConfig,
    full_cfg: &EncoderConfig,
    crop_cfg: &EncoderConfig,
    factor: usize,
    gamma: f64,
    seed: u64,
) -> Result<EncoderElement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let enc_vars = params.vars(&mut g);

    // full-resolution pass: classification + embedding
    let img = g.constant(&scene.image);
    let full = encoder_forward(&mut g, img, &enc_vars, full_cfg)?;
    let fshape = g.shape(full.features).to_vec();
    let (d, n) = (fshape[0], fshape[1] * fshape[2]);
    let feat_flat = g.reshape(full.features, &[d, n])?;
    let embedding = g.mean_axis(feat_flat, 1)?;
    let logits2 = g.reshape(full.logits, &[1, full_cfg.num_foreground_classes])?;
    let hcl = hcl_loss(&mut g, logits2, &scene.labels_tensor(), gamma)?;

    let mut local = hcl.total;
    let mut pixc_value = 0.0;
    let mut prc_value = 0.0;
    let mut pixc_skipped = false;

    if cfg.flags.pixc || cfg.flags.prc {
        // two crops snapped to the downsampling factor so both feature grids
        // cover whole cells of the source image
        let span = cfg.resize_size - cfg.crop_size;
        let choices = span / factor + 1;
        let draw_rect = |rng: &mut ChaCha8Rng| Rect {
            top: rng.random_range(0..choices) * factor,
            left: rng.random_range(0..choices) * factor,
            height: cfg.crop_size,
            width: cfg.crop_size,
        };
        let mut pair = CropPair {
            rect_a: draw_rect(&mut rng),
            rect_b: draw_rect(&mut rng),
        };
        if cfg.flags.pixc {
            for _ in 0..10 {
                if pair.grid_windows(factor).is_some() {
                    break;
                }
                pair = CropPair {
                    rect_a: draw_rect(&mut rng),
                    rect_b: draw_rect(&mut rng),
                };
            }
            pixc_skipped = pair.grid_windows(factor).is_none();
        }

        let crop_a = crop_tensor3(
            &scene.image,
            pair.rect_a.top,
            pair.rect_a.left,
            cfg.crop_size,
            cfg.crop_size,
        );
        let crop_b = crop_tensor3(
            &scene.image,
            pair.rect_b.top,
            pair.rect_b.left,
            cfg.crop_size,
            cfg.crop_size,
        );
        let ca = g.constant(&crop_a);
        let cb = g.constant(&crop_b);
        let out_a = encoder_forward(&mut g, ca, &enc_vars, crop_cfg)?;
        let out_b = encoder_forward(&mut g, cb, &enc_vars, crop_cfg)?;
        let sam_a = sam_forward(&mut g, out_a.cam, &enc_vars.sam, crop_cfg.sam_residual)?;
        let sam_b = sam_forward(&mut g, out_b.cam, &enc_vars.sam, crop_cfg.sam_residual)?;

        if cfg.flags.pixc && !pixc_skipped {
            let branches = PixcBranches {
                sam_a,
                raw_a: out_a.cam,
                sam_b,
                raw_b: out_b.cam,
            };
            let px = pixc_loss(&mut g, &branches, &pair, factor, 1e-8)?;
            if !px.empty_overlap {
                pixc_value = g.item(px.loss);
                local = g.add(local, px.loss)?;
            }
        }

        if cfg.flags.prc {
            let static_map = background_map(&mut g, sam_a)?;
            let dynamic_map = background_map(&mut g, out_b.cam)?;
            let extent = crop_cfg.grid_extent((cfg.crop_size, cfg.crop_size));
            let patch_cfg = PatchConfig::sample(extent, (2, 2), &mut rng)?;
            let rects = sample_dynamic_rects(extent, &patch_cfg, cfg.dynamic_patches, &mut rng)?;
            let pr = prc_loss(
                &mut g,
                static_map,
                dynamic_map,
                (2, 2),
                &rects,
                &cfg.sinkhorn,
                1e-8,
            )?;
            prc_value = g.item(pr.loss);
            local = g.add(local, pr.loss)?;
        }
    }

    Ok(EncoderElement {
        hcl: g.item(hcl.total),
        pixc: pixc_value,
        prc: prc_value,
        graph: g,
        param_vars: enc_vars.all(),
        embedding,
        local,
    })
}

/// Minimises the combined objective with momentum SGD and polynomial decay.
/// Deterministic for a fixed seed at any thread count.
pub fn train_encoder(
    scenes: &[SyntheticScene],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, Vec<EncoderRecord>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(invalid("train_encoder", "empty dataset"));
    }
    let full_cfg = enc_cfg.with_input_size((cfg.resize_size, cfg.resize_size))?;
    let crop_cfg = enc_cfg.with_input_size((cfg.crop_size, cfg.crop_size))?;
    let (gh, gw) = crop_cfg.grid_extent((cfg.crop_size, cfg.crop_size));
    if gh != gw || cfg.crop_size % gh != 0 {
        return Err(invalid(
            "train_encoder",
            format!("crop {} does not map onto a square grid ({gh}x{gw})", cfg.crop_size),
        ));
    }
    let factor = cfg.crop_size / gh;

    let mut params =
        EncoderParams::init(enc_cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0])))?;
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Sgd::new(
        &sizes,
        SgdConfig {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            poly_power: cfg.poly_power,
            total_steps: cfg.encoder_steps,
        },
    );
    let groups = label_groups(scenes);
    let pool = thread_pool(cfg.threads)?;
    let mut records = Vec::with_capacity(cfg.encoder_steps);

    for step in 0..cfg.encoder_steps {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, step as u64]));
        let batch = sample_batch(scenes, &groups, cfg.batch_size, &mut batch_rng);
        let b = batch.len();

        // phase A: per-element forward graphs
        let mut elements: Vec<EncoderElement> = pool.install(|| {
            use rayon::prelude::*;
            batch
                .par_iter()
                .enumerate()
                .map(|(idx, &scene_idx)| {
                    encoder_element(
                        &params,
                        &scenes[scene_idx],
                        cfg,
                        &full_cfg,
                        &crop_cfg,
                        factor,
                        cfg.focal_gamma,
                        derive_seed(cfg.seed, &[2, step as u64, idx as u64]),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;

        // phase B: batch-level image contrast over the pooled embeddings
        let mut imc_value = 0.0;
        let mut z_seeds: Vec<Option<Vec<f64>>> = vec![None; b];
        if cfg.flags.imc {
            let d = elements[0].graph.data(elements[0].embedding).len();
            let mut gi = Graph::new();
            let z_vars: Vec<Var> = elements
                .iter()
                .map(|e| {
                    let t = Tensor::new(&[d], e.graph.data(e.embedding).to_vec())
                        .expect("embedding length")
                        .with_grad();
                    gi.leaf(&t)
                })
                .collect();
            let rows: Vec<Var> = z_vars
                .iter()
                .map(|&z| gi.reshape(z, &[1, d]))
                .collect::<std::result::Result<_, _>>()?;
            let emb = gi.concat(&rows, 0)?;
            let labels = {
                let k = scenes[batch[0]].image_labels.len();
                let mut data = Vec::with_capacity(b * k);
                for &i in &batch {
                    data.extend_from_slice(&scenes[i].image_labels);
                }
                Tensor::new(&[b, k], data).expect("sizes agree")
            };
            let mask = PairMask::from_labels(&labels)?;
            let out = imc_loss(&mut gi, emb, &mask, &ImcConfig::default())?;
            imc_value = gi.item(out.loss);
            if !out.no_valid_query {
                gi.backward(out.loss)?;
                for (i, &z) in z_vars.iter().enumerate() {
                    z_seeds[i] = gi.grad(z).map(|s| s.to_vec());
                }
            }
        }

        // phase A2: per-element backward with the batch-mean weight plus the
        // embedding seed from the image-contrast term
        let inv_b = 1.0 / b as f64;
        pool.install(|| {
            use rayon::prelude::*;
            elements
                .par_iter_mut()
                .zip(z_seeds.par_iter())
                .map(|(e, seed)| {
                    let mut seeds = vec![(e.local, vec![inv_b])];
                    if let Some(s) = seed {
                        seeds.push((e.embedding, s.clone()));
                    }
                    e.graph.backward_seeded(&seeds).map_err(PipelineError::from)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        // fixed-order reduction
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for e in &elements {
            for (slot, &var) in e.param_vars.iter().enumerate() {
                if let Some(gr) = e.graph.grad(var) {
                    for (acc, &v) in grads[slot].iter_mut().zip(gr) {
                        *acc += v;
                    }
                }
            }
        }

        let hcl = elements.iter().map(|e| e.hcl).sum::<f64>() * inv_b;
        let pixc = elements.iter().map(|e| e.pixc).sum::<f64>() * inv_b;
        let prc = elements.iter().map(|e| e.prc).sum::<f64>() * inv_b;
        let total = hcl + imc_value + pixc + prc;
        check_finite(
            step,
            &[
                ("hcl", hcl),
                ("imc", imc_value),
                ("pixc", pixc),
                ("prc", prc),
            ],
        )?;

        clip_gradients(&mut grads, cfg.grad_clip);
        opt.step(step, &mut params.tensors_mut(), &grads);
        records.push(EncoderRecord {
            step,
            hcl,
            imc: imc_value,
            pixc,
            prc,
            total,
        });
    }
    Ok((params, records))
}

// ── stage 2: decoder ─────────────────────────────────────────────────

/// The only inputs stage-2 training may read: the image and its pseudo mask.
/// Ground truth never crosses this boundary; it is used exclusively by the
/// evaluation operations.
#[derive(Debug, Clone)]
pub struct DecoderTrainScene {
    pub id: usize,
    pub image: Tensor,
    pub pseudo_mask: Tensor,
}

/// Join scenes with their exported masks; every scene must be covered.
pub fn pair_training_scenes(
    scenes: &[SyntheticScene],
    masks: &[PseudoMask],
) -> Result<Vec<DecoderTrainScene>> {
    let by_id: BTreeMap<usize, &PseudoMask> = masks.iter().map(|m| (m.source_id, m)).collect();
    scenes
        .iter()
        .map(|s| {
            let m = by_id.get(&s.id).ok_or_else(|| {
                invalid(
                    "train_decoder",
                    format!("no pseudo mask for scene {}", s.id),
                )
            })?;
            Ok(DecoderTrainScene {
                id: s.id,
                image: s.image.clone(),
                pseudo_mask: m.soft.clone(),
            })
        })
        .collect()
}

struct DecoderElement {
    graph: Graph,
    param_vars: Vec<Var>,
    total: Var,
    ce: f64,
    beacon: f64,
    seg_map: ClassMap,
    sets: Option<crate::boundary::BoundaryPointSets>,
    signs: Option<(Vec<f64>, Vec<f64>)>,
}

#[allow(clippy::too_many_arguments)]
fn decoder_element(
    enc: &EncoderParams,
    dec: &DecoderParams,
    enc_cfg: &EncoderConfig,
    scene: &DecoderTrainScene,
    beacon_cfg: &BeaconConfig,
    num_classes: usize,
    finetune: bool,
    seed: u64,
) -> Result<DecoderElement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let enc_vars = if finetune {
        enc.vars(&mut g)
    } else {
        frozen_vars(&mut g, enc)
    };
    let dec_vars = dec.vars(&mut g);
    let img = g.constant(&scene.image);
    let full_cfg = enc_cfg.with_input_size((scene.image.shape()[1], scene.image.shape()[2]))?;
    let dense = decoder_forward(&mut g, img, &enc_vars, &full_cfg, &dec_vars, num_classes)?;
    let seg = crate::boundary::seg_loss(&mut g, dense, &scene.pseudo_mask, beacon_cfg, &mut rng)?;

    let mut param_vars = Vec::new();
    if finetune {
        param_vars.extend(enc_vars.all());
    }
    param_vars.extend(dec_vars.all());

    let seg_map = ClassMap::from_argmax(g.value(dense))?;
    Ok(DecoderElement {
        ce: g.item(seg.ce),
        beacon: seg.beacon.as_ref().map(|b| g.item(b.loss)).unwrap_or(0.0),
        signs: seg
            .beacon
            .as_ref()
            .map(|b| (b.signs.sign_inward.clone(), b.signs.sign_outward.clone())),
        sets: seg.sets.clone(),
        total: seg.total,
        param_vars,
        graph: g,
        seg_map,
    })
}

/// Optional per-step diagnostics: the boundary mask of the first batch
/// element as a binary PGM plus the sampled points with their signs as CSV.
fn dump_diagnostics(dir: &Path, step: usize, element: &DecoderElement) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let om = orientation_map(&element.seg_map);
    let (h, w) = (element.seg_map.height, element.seg_map.width);
    let mut pgm = Vec::with_capacity(32 + h * w);
    pgm.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    pgm.extend(om.boundary_mask.iter().map(|&b| if b { 255u8 } else { 0 }));
    std::fs::write(dir.join(format!("step_{step:05}_boundary.pgm")), pgm)?;

    let mut csv = String::from("x,y,set,sign\n");
    if let (Some(sets), Some((sign_in, sign_out))) = (&element.sets, &element.signs) {
        for (p, s) in sets.inward.iter().zip(sign_in) {
            csv.push_str(&format!("{},{},inward,{}\n", p.1, p.0, s));
        }
        for (p, s) in sets.outward.iter().zip(sign_out) {
            csv.push_str(&format!("{},{},outward,{}\n", p.1, p.0, s));
        }
    }
    std::fs::write(dir.join(format!("step_{step:05}_points.csv")), csv)?;
    Ok(())
}

/// Trains the decoder (optionally finetuning the encoder) against pseudo
/// masks. `diagnostics` dumps the first element's boundary data per step.
pub fn train_decoder(
    training: &[DecoderTrainScene],
    enc_init: &EncoderParams,
    dec_cfg: &DecoderConfig,
    beacon_cfg: &BeaconConfig,
    cfg: &TrainConfig,
    diagnostics: Option<&Path>,
) -> Result<(EncoderParams, DecoderParams, Vec<DecoderRecord>)> {
    cfg.validate()?;
    if training.is_empty() {
        return Err(invalid("train_decoder", "empty training set"));
    }
    let num_classes = enc_init.cfg.num_foreground_classes + 1;
    for t in training {
        if t.pseudo_mask.shape()[0] != num_classes {
            return Err(invalid(
                "train_decoder",
                format!(
                    "pseudo mask for scene {} has {} channels, expected {num_classes}",
                    t.id,
                    t.pseudo_mask.shape()[0]
                ),
            ));
        }
    }

    let mut enc = enc_init.clone();
    let mut dec = DecoderParams::init(
        &enc.cfg,
        dec_cfg,
        num_classes,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3])),
    )?;

    let mut sizes: Vec<usize> = Vec::new();
    if dec_cfg.finetune_encoder {
        sizes.extend(enc.named().iter().map(|(_, t)| t.numel()));
    }
    sizes.extend(dec.named().iter().map(|(_, t)| t.numel()));
    let mut opt = Sgd::new(
        &sizes,
        SgdConfig {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            poly_power: cfg.poly_power,
            total_steps: cfg.decoder_steps,
        },
    );
    let pool = thread_pool(cfg.threads)?;
    let mut records = Vec::with_capacity(cfg.decoder_steps);

    for step in 0..cfg.decoder_steps {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[5, step as u64]));
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.random_range(0..training.len()))
            .collect();
        let b = batch.len();
        let inv_b = 1.0 / b as f64;

        let mut elements: Vec<DecoderElement> = pool.install(|| {
            use rayon::prelude::*;
            batch
                .par_iter()
                .enumerate()
                .map(|(idx, &scene_idx)| {
                    decoder_element(
                        &enc,
                        &dec,
                        &enc.cfg,
                        &training[scene_idx],
                        beacon_cfg,
                        num_classes,
                        dec_cfg.finetune_encoder,
                        derive_seed(cfg.seed, &[4, step as u64, idx as u64]),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;

        pool.install(|| {
            use rayon::prelude::*;
            elements
                .par_iter_mut()
                .map(|e| {
                    e.graph
                        .backward_seeded(&[(e.total, vec![inv_b])])
                        .map_err(PipelineError::from)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for e in &elements {
            for (slot, &var) in e.param_vars.iter().enumerate() {
                if let Some(gr) = e.graph.grad(var) {
                    for (acc, &v) in grads[slot].iter_mut().zip(gr) {
                        *acc += v;
                    }
                }
            }
        }

        let ce = elements.iter().map(|e| e.ce).sum::<f64>() * inv_b;
        let beacon = elements.iter().map(|e| e.beacon).sum::<f64>() * inv_b;
        let total = ce + beacon_cfg.lambda * beacon;
        check_finite(step, &[("ce", ce), ("beacon", beacon)])?;

        if let Some(dir) = diagnostics {
            dump_diagnostics(dir, step, &elements[0])?;
        }

        clip_gradients(&mut grads, cfg.grad_clip);
        {
            let mut refs: Vec<&mut Tensor> = Vec::new();
            if dec_cfg.finetune_encoder {
                refs.extend(enc.tensors_mut());
            }
            refs.extend(dec.tensors_mut());
            opt.step(step, &mut refs, &grads);
        }
        records.push(DecoderRecord {
            step,
            ce,
            beacon,
            total,
        });
    }
    Ok((enc, dec, records))
}

/// Hard prediction for one image through the trained encoder + decoder.
pub fn predict_class_map(
    enc: &EncoderParams,
    dec: &DecoderParams,
    image: &Tensor,
) -> Result<ClassMap> {
    let mut g = Graph::new();
    let img = g.constant(image);
    let enc_vars = frozen_vars(&mut g, enc);
    let dec_vars = dec.frozen_vars(&mut g);
    let cfg = enc.cfg.with_input_size((image.shape()[1], image.shape()[2]))?;
    let dense = decoder_forward(
        &mut g,
        img,
        &enc_vars,
        &cfg,
        &dec_vars,
        enc.cfg.num_foreground_classes + 1,
    )?;
    Ok(ClassMap::from_argmax(g.value(dense))?)
}
