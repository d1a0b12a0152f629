//! Command-line entry points: dataset generation, the two training stages,
//! pseudo-mask export, evaluation, and the ablation suites.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
//! divergence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::boundary::{BeaconConfig, ClassMap, TauPolicy};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::pipeline::{
    self, evaluate_boundary_f, evaluate_miou, export_pseudo_masks, generate_dataset,
    load_pseudo_masks, read_dataset, save_pseudo_masks, train_decoder, train_encoder,
    write_dataset, BoundaryFReport, DecoderConfig, LossFlags, MiouReport, PipelineError,
    SyntheticScene, TrainConfig,
};
use crate::pipeline::data::NUM_FOREGROUND_CLASSES;
use crate::pipeline::train::{
    pair_training_scenes, predict_class_map, write_decoder_csv, write_encoder_csv,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "numerical divergence: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

macro_rules! data_err {
    ($($t:tt)*) => { CliError::Data(format!($($t)*)) };
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "contraseg",
    version,
    about = "Weakly supervised segmentation sandbox: contrastive CAM training and boundary-refined decoding on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with an 80/20 train/val split.
    GenData {
        /// Number of scenes to generate.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: train the classification encoder with the contrastive terms.
    TrainEncoder {
        /// Dataset root (contains train/ and val/).
        #[arg(long)]
        data: PathBuf,
        /// Flat key-value config file (TOML); CLI flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Disable the image-level contrast term.
        #[arg(long)]
        no_imc: bool,
        /// Disable the pixel-level contrast term.
        #[arg(long)]
        no_pixc: bool,
        /// Disable the regional contrast term.
        #[arg(long)]
        no_prc: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Export soft pseudo masks from trained encoder weights.
    ExportMasks {
        /// Encoder run directory (weights.bin / weights.json / config.json).
        #[arg(long)]
        weights: PathBuf,
        /// Inference scales, comma separated.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the segmentation decoder against pseudo masks.
    TrainDecoder {
        /// Pseudo-mask directory from export-masks.
        #[arg(long)]
        masks: PathBuf,
        /// Encoder run directory providing the initial weights.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Boundary contrast on or off.
        #[arg(long, default_value = "on", value_parser = ["on", "off"])]
        beacon: String,
        /// Boundary term weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Boundary displacement in pixels.
        #[arg(long)]
        steps: Option<usize>,
        /// Points sampled per boundary set.
        #[arg(long)]
        k: Option<usize>,
        /// Threshold policy: fixed:<v> or mean.
        #[arg(long)]
        tau: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Optimisation step count (the boundary displacement is --steps).
        #[arg(long)]
        train_steps: Option<usize>,
        /// Dump per-step boundary masks and sampled points.
        #[arg(long)]
        diagnostics: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score prediction PNGs against a dataset split.
    Eval {
        /// Directory of predicted masks (scene_XXXXX.png).
        #[arg(long)]
        pred: PathBuf,
        /// Dataset split directory with ground truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        tolerance: usize,
    },
    /// Run a predefined comparison grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// mcl: loss-term grid over the encoder; beacon: boundary-term grid over
    /// the decoder.
    #[arg(long, value_parser = ["mcl", "beacon"])]
    suite: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder steps per cell (mcl suite); reduced grids for CI.
    #[arg(long)]
    steps: Option<usize>,
    /// Decoder steps per cell (beacon suite).
    #[arg(long)]
    train_steps: Option<usize>,
    /// Encoder run directory (beacon suite).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Pseudo-mask directory (beacon suite).
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

// ── config file ──────────────────────────────────────────────────────

/// Flat key-value run configuration; every field optional, defaults apply.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub poly_power: Option<f64>,
    pub encoder_steps: Option<usize>,
    pub decoder_steps: Option<usize>,
    pub resize_size: Option<usize>,
    pub crop_size: Option<usize>,
    pub scales: Option<Vec<f64>>,
    pub grad_clip: Option<f64>,
    pub focal_gamma: Option<f64>,
    pub dynamic_patches: Option<usize>,
    pub threads: Option<usize>,
    pub sinkhorn_epsilon: Option<f64>,
    pub sinkhorn_max_iters: Option<usize>,
    pub sinkhorn_tolerance: Option<f64>,
    pub imc: Option<bool>,
    pub pixc: Option<bool>,
    pub prc: Option<bool>,
    pub widths: Option<Vec<usize>>,
    pub strides: Option<Vec<usize>>,
    pub sam_residual: Option<bool>,
    pub lambda: Option<f64>,
    pub beacon_steps: Option<usize>,
    pub beacon_k: Option<usize>,
    pub tau: Option<String>,
    pub finetune_encoder: Option<bool>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| data_err!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    fn apply_train(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        set!(seed);
        set!(batch_size);
        set!(learning_rate);
        set!(momentum);
        set!(poly_power);
        set!(grad_clip);
        set!(encoder_steps);
        set!(decoder_steps);
        set!(resize_size);
        set!(crop_size);
        set!(scales);
        set!(focal_gamma);
        set!(dynamic_patches);
        set!(threads);
        if let Some(v) = self.sinkhorn_epsilon {
            cfg.sinkhorn.epsilon = v;
        }
        if let Some(v) = self.sinkhorn_max_iters {
            cfg.sinkhorn.max_iters = v;
        }
        if let Some(v) = self.sinkhorn_tolerance {
            cfg.sinkhorn.tolerance = v;
        }
        if let Some(v) = self.imc {
            cfg.flags.imc = v;
        }
        if let Some(v) = self.pixc {
            cfg.flags.pixc = v;
        }
        if let Some(v) = self.prc {
            cfg.flags.prc = v;
        }
    }

    fn apply_encoder(&self, cfg: &mut EncoderConfig) {
        if let Some(v) = self.widths.clone() {
            cfg.widths = v;
        }
        if let Some(v) = self.strides.clone() {
            cfg.strides = v;
        }
        if let Some(v) = self.sam_residual {
            cfg.sam_residual = v;
        }
    }

    fn apply_beacon(&self, cfg: &mut BeaconConfig) -> Result<()> {
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.beacon_steps {
            cfg.steps = v;
        }
        if let Some(v) = self.beacon_k {
            cfg.k = v;
        }
        if let Some(t) = &self.tau {
            cfg.tau = parse_tau(t)?;
        }
        Ok(())
    }
}

pub fn parse_tau(text: &str) -> Result<TauPolicy> {
    if text == "mean" {
        return Ok(TauPolicy::MaskMean);
    }
    if let Some(v) = text.strip_prefix("fixed:") {
        let v: f64 = v
            .parse()
            .map_err(|_| CliError::Usage(format!("bad tau value in {text:?}")))?;
        return Ok(TauPolicy::Fixed(v));
    }
    Err(CliError::Usage(format!(
        "tau must be 'mean' or 'fixed:<value>', got {text:?}"
    )))
}

/// MUSCLE_SEED wins over config files and flags.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("MUSCLE_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("MUSCLE_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(None),
    }
}

// ── run manifest ─────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// FNV-1a hash of the running executable: a content hash of the code
    /// version that produced the run.
    pub code_hash: String,
    pub created_unix: u64,
    pub config: serde_json::Value,
    pub outputs: BTreeMap<String, String>,
}

fn code_hash() -> String {
    let bytes = std::env::current_exe()
        .and_then(std::fs::read)
        .unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    outputs: BTreeMap<String, String>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        seed,
        code_hash: code_hash(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| data_err!("manifest serialisation: {e}"))?;
    std::fs::write(dir.join("manifest.json"), json)
        .map_err(|e| data_err!("writing manifest: {e}"))?;
    Ok(())
}

/// Timestamp-free metric report; identical runs produce identical bytes.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub miou: MiouReport,
    pub boundary_f: BoundaryFReport,
    /// Loss curve CSV paths relative to the run directory.
    pub loss_curves: Vec<String>,
}

impl PartialEq for MiouReport {
    fn eq(&self, other: &Self) -> bool {
        self.per_class == other.per_class && self.mean == other.mean
    }
}

impl PartialEq for BoundaryFReport {
    fn eq(&self, other: &Self) -> bool {
        self.precision == other.precision
            && self.recall == other.recall
            && self.f_score == other.f_score
            && self.scenes_scored == other.scenes_scored
    }
}

// ── shared helpers ───────────────────────────────────────────────────

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| data_err!("cannot read {}: {e}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(data_err!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| data_err!("cannot create {}: {e}", dir.display()))?;
    Ok(())
}

fn load_split(root: &Path, split: &str, producer: &str) -> Result<Vec<SyntheticScene>> {
    let dir = root.join(split);
    if !dir.join("labels.json").exists() {
        return Err(data_err!(
            "missing dataset split {} (generate it with `{producer}`)",
            dir.display()
        ));
    }
    Ok(read_dataset(&dir)?)
}

fn load_encoder_run(dir: &Path) -> Result<(EncoderParams, TrainConfig)> {
    let cfg_path = dir.join("config.json");
    if !cfg_path.exists() {
        return Err(data_err!(
            "missing encoder run config {} (produce it with `contraseg train-encoder`)",
            cfg_path.display()
        ));
    }
    let snapshot: ConfigSnapshot = serde_json::from_str(
        &std::fs::read_to_string(&cfg_path).map_err(|e| data_err!("{e}"))?,
    )
    .map_err(|e| data_err!("parsing {}: {e}", cfg_path.display()))?;
    let params = EncoderParams::load(&snapshot.encoder, dir)
        .map_err(|e| data_err!("loading encoder weights from {}: {e}", dir.display()))?;
    Ok((params, snapshot.train))
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigSnapshot {
    encoder: EncoderConfig,
    train: TrainConfig,
}

fn config_value(snapshot: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(snapshot).unwrap_or(serde_json::Value::Null)
}

fn evaluate_predictions(
    preds: &[ClassMap],
    scenes: &[SyntheticScene],
    tolerance: usize,
    loss_curves: Vec<String>,
) -> Result<MetricsReport> {
    let gts: Vec<ClassMap> = scenes.iter().map(|s| s.gt_mask.clone()).collect();
    let miou = evaluate_miou(preds, &gts, NUM_FOREGROUND_CLASSES + 1)?;
    let boundary_f = evaluate_boundary_f(preds, &gts, tolerance)?;
    Ok(MetricsReport {
        miou,
        boundary_f,
        loss_curves,
    })
}

fn save_prediction_pngs(dir: &Path, scenes: &[SyntheticScene], preds: &[ClassMap]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| data_err!("{e}"))?;
    for (scene, pred) in scenes.iter().zip(preds) {
        let img = image::GrayImage::from_raw(
            pred.width as u32,
            pred.height as u32,
            pred.data.clone(),
        )
        .expect("buffer sized");
        img.save(dir.join(format!("scene_{:05}.png", scene.id)))
            .map_err(|e| data_err!("{e}"))?;
    }
    Ok(())
}

/// Pseudo-mask quality on a split: argmax of the soft masks against ground
/// truth.
fn pseudo_mask_miou(
    params: &EncoderParams,
    scenes: &[SyntheticScene],
    scales: &[f64],
) -> Result<MiouReport> {
    let masks = export_pseudo_masks(params, scenes, scales)?;
    let preds: Vec<ClassMap> = masks.iter().map(|m| m.to_class_map()).collect();
    let gts: Vec<ClassMap> = scenes.iter().map(|s| s.gt_mask.clone()).collect();
    Ok(evaluate_miou(&preds, &gts, NUM_FOREGROUND_CLASSES + 1)?)
}

// ── commands ─────────────────────────────────────────────────────────

fn cmd_gen_data(n: usize, seed: u64, out: &Path, force: bool) -> Result<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    ensure_out_dir(out, force)?;
    let scenes = generate_dataset(n, seed);
    let split = (n as f64 * 0.8).round() as usize;
    let split = split.clamp(1, n);
    write_dataset(&out.join("train"), &scenes[..split])?;
    if split < n {
        write_dataset(&out.join("val"), &scenes[split..])?;
    } else {
        write_dataset(&out.join("val"), &scenes[split - 1..])?;
    }

    let mut coverage = vec![0usize; NUM_FOREGROUND_CLASSES];
    for s in &scenes {
        for (c, &l) in s.image_labels.iter().enumerate() {
            if l == 1.0 {
                coverage[c] += 1;
            }
        }
    }
    let coverage: Vec<f64> = coverage.iter().map(|&c| c as f64 / n as f64).collect();
    let mut outputs = BTreeMap::new();
    outputs.insert("train".into(), "train".into());
    outputs.insert("val".into(), "val".into());
    write_manifest(
        out,
        "gen-data",
        seed,
        serde_json::json!({ "n": n, "class_coverage": coverage }),
        outputs,
    )?;
    println!("generated {n} scenes under {}", out.display());
    for (c, frac) in coverage.iter().enumerate() {
        println!("class {} coverage: {:.3}", c + 1, frac);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_encoder(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    flags_off: (bool, bool, bool),
    threads: Option<usize>,
) -> Result<()> {
    let file = FileConfig::load(config)?;
    let mut train_cfg = TrainConfig::default();
    file.apply_train(&mut train_cfg);
    let mut enc_cfg = EncoderConfig::default();
    file.apply_encoder(&mut enc_cfg);
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(s) = steps {
        train_cfg.encoder_steps = s;
    }
    if let Some(t) = threads {
        train_cfg.threads = t;
    }
    if flags_off.0 {
        train_cfg.flags.imc = false;
    }
    if flags_off.1 {
        train_cfg.flags.pixc = false;
    }
    if flags_off.2 {
        train_cfg.flags.prc = false;
    }
    if let Some(s) = env_seed()? {
        train_cfg.seed = s;
    }

    let scenes = load_split(data, "train", "contraseg gen-data")?;
    ensure_out_dir(out, true)?;
    let (params, records) = train_encoder(&scenes, &enc_cfg, &train_cfg)?;
    params.save(out).map_err(|e| data_err!("{e}"))?;
    write_encoder_csv(&out.join("loss.csv"), &records)?;
    let snapshot = ConfigSnapshot {
        encoder: enc_cfg,
        train: train_cfg.clone(),
    };
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&snapshot).map_err(|e| data_err!("{e}"))?,
    )
    .map_err(|e| data_err!("{e}"))?;
    let mut outputs = BTreeMap::new();
    outputs.insert("weights".into(), "weights.bin".into());
    outputs.insert("loss_csv".into(), "loss.csv".into());
    outputs.insert("config".into(), "config.json".into());
    write_manifest(
        out,
        "train-encoder",
        train_cfg.seed,
        config_value(&snapshot),
        outputs,
    )?;
    let last = records.last().expect("at least one step");
    println!(
        "trained encoder for {} steps; final losses hcl={:.4} imc={:.4} pixc={:.4} prc={:.4}",
        records.len(),
        last.hcl,
        last.imc,
        last.pixc,
        last.prc
    );
    Ok(())
}

fn cmd_export_masks(weights: &Path, scales: &[f64], data: &Path, out: &Path) -> Result<()> {
    if scales.is_empty() {
        return Err(CliError::Usage("--scales needs at least one value".into()));
    }
    let (params, train_cfg) = load_encoder_run(weights)?;
    let scenes = load_split(data, "train", "contraseg gen-data")?;
    ensure_out_dir(out, true)?;
    let masks = export_pseudo_masks(&params, &scenes, scales)?;
    save_pseudo_masks(out, &masks)?;
    let mut outputs = BTreeMap::new();
    outputs.insert("masks".into(), "masks.json".into());
    write_manifest(
        out,
        "export-masks",
        train_cfg.seed,
        serde_json::json!({ "scales": scales, "weights": weights.display().to_string() }),
        outputs,
    )?;
    println!("exported {} pseudo masks to {}", masks.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_decoder(
    masks: &Path,
    weights: &Path,
    data: &Path,
    out: &Path,
    beacon_on: bool,
    lambda: Option<f64>,
    steps: Option<usize>,
    k: Option<usize>,
    tau: Option<&str>,
    config: Option<&Path>,
    seed: Option<u64>,
    train_steps: Option<usize>,
    diagnostics: bool,
    threads: Option<usize>,
) -> Result<()> {
    let file = FileConfig::load(config)?;
    let mut train_cfg = TrainConfig::default();
    file.apply_train(&mut train_cfg);
    let mut beacon_cfg = BeaconConfig::default();
    file.apply_beacon(&mut beacon_cfg)?;
    let mut dec_cfg = DecoderConfig::default();
    if let Some(v) = file.finetune_encoder {
        dec_cfg.finetune_encoder = v;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(s) = train_steps {
        train_cfg.decoder_steps = s;
    }
    if let Some(t) = threads {
        train_cfg.threads = t;
    }
    if let Some(v) = lambda {
        beacon_cfg.lambda = v;
    }
    if let Some(v) = steps {
        beacon_cfg.steps = v;
    }
    if let Some(v) = k {
        beacon_cfg.k = v;
    }
    if let Some(t) = tau {
        beacon_cfg.tau = parse_tau(t)?;
    }
    if !beacon_on {
        if lambda.is_some() {
            eprintln!("warning: --lambda ignored because --beacon off");
        }
        beacon_cfg.lambda = 0.0;
    }
    if let Some(s) = env_seed()? {
        train_cfg.seed = s;
    }

    if !masks.join("masks.json").exists() {
        return Err(data_err!(
            "missing pseudo masks at {} (produce them with `contraseg export-masks`)",
            masks.display()
        ));
    }
    let (enc_init, _) = load_encoder_run(weights)?;
    let train_scenes = load_split(data, "train", "contraseg gen-data")?;
    let val_scenes = load_split(data, "val", "contraseg gen-data")?;
    let pseudo = load_pseudo_masks(masks)?;
    let training = pair_training_scenes(&train_scenes, &pseudo)?;
    ensure_out_dir(out, true)?;

    let diag_dir = out.join("diagnostics");
    let (enc, dec, records) = train_decoder(
        &training,
        &enc_init,
        &dec_cfg,
        &beacon_cfg,
        &train_cfg,
        diagnostics.then_some(diag_dir.as_path()),
    )?;
    enc.save(out).map_err(|e| data_err!("{e}"))?;
    dec.save(out)?;
    write_decoder_csv(&out.join("loss.csv"), &records)?;

    let preds: Vec<ClassMap> = val_scenes
        .iter()
        .map(|s| predict_class_map(&enc, &dec, &s.image))
        .collect::<pipeline::Result<_>>()?;
    save_prediction_pngs(&out.join("predictions"), &val_scenes, &preds)?;
    let report = evaluate_predictions(&preds, &val_scenes, 2, vec!["loss.csv".into()])?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report).map_err(|e| data_err!("{e}"))?,
    )
    .map_err(|e| data_err!("{e}"))?;

    let snapshot = serde_json::json!({
        "train": train_cfg,
        "beacon": beacon_cfg,
        "decoder": dec_cfg,
        "beacon_enabled": beacon_on,
    });
    let mut outputs = BTreeMap::new();
    outputs.insert("decoder".into(), "decoder.bin".into());
    outputs.insert("encoder".into(), "weights.bin".into());
    outputs.insert("metrics".into(), "metrics.json".into());
    outputs.insert("predictions".into(), "predictions".into());
    outputs.insert("loss_csv".into(), "loss.csv".into());
    write_manifest(out, "train-decoder", train_cfg.seed, snapshot, outputs)?;
    println!(
        "val mIoU {:.4}, boundary F {:.4} over {} scenes",
        report.miou.mean, report.boundary_f.f_score, preds.len()
    );
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, out: Option<&Path>, tolerance: usize) -> Result<()> {
    let scenes = read_dataset(gt).map_err(|e| {
        data_err!(
            "cannot read ground truth split {}: {e} (generate it with `contraseg gen-data`)",
            gt.display()
        )
    })?;
    let preds: Vec<ClassMap> = scenes
        .iter()
        .map(|s| -> Result<ClassMap> {
            let path = pred.join(format!("scene_{:05}.png", s.id));
            let img = image::open(&path)
                .map_err(|e| {
                    data_err!(
                        "missing prediction {} ({e}); produce predictions with `contraseg train-decoder`",
                        path.display()
                    )
                })?
                .into_luma8();
            ClassMap::new(
                img.height() as usize,
                img.width() as usize,
                img.into_raw(),
            )
            .map_err(|e| data_err!("{e}"))
        })
        .collect::<Result<_>>()?;
    let report = evaluate_predictions(&preds, &scenes, tolerance, vec![])?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| data_err!("{e}"))?;
    if let Some(path) = out {
        std::fs::write(path, &json).map_err(|e| data_err!("{e}"))?;
    }
    println!("{json}");
    Ok(())
}

// ── ablation suites ──────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct MclRow {
    hcl: bool,
    imc: bool,
    pixc: bool,
    prc: bool,
    single_scale_miou: f64,
    multi_scale_miou: f64,
}

fn ablate_mcl(args: &AblateArgs, train_cfg: &TrainConfig, enc_cfg: &EncoderConfig) -> Result<()> {
    let scenes = load_split(&args.data, "train", "contraseg gen-data")?;
    ensure_out_dir(&args.out, true)?;
    let combos = [
        ("hcl", LossFlags { imc: false, pixc: false, prc: false }),
        ("hcl+imc", LossFlags { imc: true, pixc: false, prc: false }),
        ("hcl+imc+pixc", LossFlags { imc: true, pixc: true, prc: false }),
        ("hcl+imc+pixc+prc", LossFlags { imc: true, pixc: true, prc: true }),
    ];
    let mut rows = Vec::new();
    for (name, flags) in combos {
        let mut cfg = train_cfg.clone();
        cfg.flags = flags;
        let (params, records) = train_encoder(&scenes, enc_cfg, &cfg)?;
        let cell_dir = args.out.join(name);
        std::fs::create_dir_all(&cell_dir).map_err(|e| data_err!("{e}"))?;
        params.save(&cell_dir).map_err(|e| data_err!("{e}"))?;
        write_encoder_csv(&cell_dir.join("loss.csv"), &records)?;
        let single = pseudo_mask_miou(&params, &scenes, &[1.0])?;
        let multi = pseudo_mask_miou(&params, &scenes, &cfg.scales)?;
        rows.push(MclRow {
            hcl: true,
            imc: flags.imc,
            pixc: flags.pixc,
            prc: flags.prc,
            single_scale_miou: single.mean,
            multi_scale_miou: multi.mean,
        });
    }
    println!("HCL   IMC   PIXC  PRC   single-mIoU  multi-mIoU");
    for r in &rows {
        let tick = |b: bool| if b { "yes" } else { "no " };
        println!(
            "{}   {}   {}   {}   {:.4}       {:.4}",
            tick(r.hcl),
            tick(r.imc),
            tick(r.pixc),
            tick(r.prc),
            r.single_scale_miou,
            r.multi_scale_miou
        );
    }
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&rows).map_err(|e| data_err!("{e}"))?,
    )
    .map_err(|e| data_err!("{e}"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BeaconRow {
    lambda: f64,
    steps: usize,
    k: usize,
    tau: String,
    val_miou: f64,
    boundary_f: f64,
}

fn ablate_beacon(args: &AblateArgs, train_cfg: &TrainConfig) -> Result<()> {
    let weights = args.weights.as_deref().ok_or_else(|| {
        data_err!("--weights is required (produce an encoder run with `contraseg train-encoder`)")
    })?;
    let masks = args.masks.as_deref().ok_or_else(|| {
        data_err!("--masks is required (produce pseudo masks with `contraseg export-masks`)")
    })?;
    let (enc_init, _) = load_encoder_run(weights)?;
    let train_scenes = load_split(&args.data, "train", "contraseg gen-data")?;
    let val_scenes = load_split(&args.data, "val", "contraseg gen-data")?;
    let pseudo = load_pseudo_masks(masks)?;
    let training = pair_training_scenes(&train_scenes, &pseudo)?;
    ensure_out_dir(&args.out, true)?;

    let grid: Vec<(f64, usize, usize, TauPolicy, &str)> = vec![
        (0.0, 7, 128, TauPolicy::MaskMean, "off"),
        (0.05, 7, 128, TauPolicy::Fixed(0.5), "fixed:0.5"),
        (0.05, 7, 128, TauPolicy::MaskMean, "mean"),
    ];
    let mut rows = Vec::new();
    for (lambda, steps, k, tau, tau_name) in grid {
        let beacon_cfg = BeaconConfig {
            lambda,
            steps,
            k,
            tau,
            inward_along_gradient: true,
        };
        let (enc, dec, records) = train_decoder(
            &training,
            &enc_init,
            &DecoderConfig::default(),
            &beacon_cfg,
            train_cfg,
            None,
        )?;
        let cell = format!("lambda{lambda}_steps{steps}_k{k}_tau-{tau_name}");
        let cell_dir = args.out.join(&cell);
        std::fs::create_dir_all(&cell_dir).map_err(|e| data_err!("{e}"))?;
        write_decoder_csv(&cell_dir.join("loss.csv"), &records)?;
        let preds: Vec<ClassMap> = val_scenes
            .iter()
            .map(|s| predict_class_map(&enc, &dec, &s.image))
            .collect::<pipeline::Result<_>>()?;
        let report = evaluate_predictions(&preds, &val_scenes, 2, vec![])?;
        rows.push(BeaconRow {
            lambda,
            steps,
            k,
            tau: tau_name.to_string(),
            val_miou: report.miou.mean,
            boundary_f: report.boundary_f.f_score,
        });
    }
    println!("lambda  steps  k    tau        val-mIoU  boundary-F");
    for r in &rows {
        println!(
            "{:<7} {:<6} {:<4} {:<10} {:.4}    {:.4}",
            r.lambda, r.steps, r.k, r.tau, r.val_miou, r.boundary_f
        );
    }
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&rows).map_err(|e| data_err!("{e}"))?,
    )
    .map_err(|e| data_err!("{e}"))?;
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut train_cfg = TrainConfig::default();
    file.apply_train(&mut train_cfg);
    let mut enc_cfg = EncoderConfig::default();
    file.apply_encoder(&mut enc_cfg);
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    if let Some(s) = args.steps {
        train_cfg.encoder_steps = s;
    }
    if let Some(s) = args.train_steps {
        train_cfg.decoder_steps = s;
    }
    if let Some(t) = args.threads {
        train_cfg.threads = t;
    }
    if let Some(s) = env_seed()? {
        train_cfg.seed = s;
    }
    match args.suite.as_str() {
        "mcl" => ablate_mcl(&args, &train_cfg, &enc_cfg),
        "beacon" => ablate_beacon(&args, &train_cfg),
        other => Err(CliError::Usage(format!("unknown suite {other:?}"))),
    }
}

/// Dispatch a parsed command line; the binary maps the error to its exit
/// code.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            force,
        } => {
            let seed = env_seed()?.unwrap_or(seed);
            cmd_gen_data(n, seed, &out, force)
        }
        Command::TrainEncoder {
            data,
            config,
            out,
            seed,
            steps,
            no_imc,
            no_pixc,
            no_prc,
            threads,
        } => cmd_train_encoder(
            &data,
            config.as_deref(),
            &out,
            seed,
            steps,
            (no_imc, no_pixc, no_prc),
            threads,
        ),
        Command::ExportMasks {
            weights,
            scales,
            data,
            out,
        } => cmd_export_masks(&weights, &scales, &data, &out),
        Command::TrainDecoder {
            masks,
            weights,
            data,
            out,
            beacon,
            lambda,
            steps,
            k,
            tau,
            config,
            seed,
            train_steps,
            diagnostics,
            threads,
        } => cmd_train_decoder(
            &masks,
            &weights,
            &data,
            &out,
            beacon == "on",
            lambda,
            steps,
            k,
            tau.as_deref(),
            config.as_deref(),
            seed,
            train_steps,
            diagnostics,
            threads,
        ),
        Command::Eval {
            pred,
            gt,
            out,
            tolerance,
        } => cmd_eval(&pred, &gt, out.as_deref(), tolerance),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_parsing() {
        assert_eq!(parse_tau("mean").unwrap(), TauPolicy::MaskMean);
        assert_eq!(parse_tau("fixed:0.5").unwrap(), TauPolicy::Fixed(0.5));
        assert!(parse_tau("median").is_err());
        assert!(parse_tau("fixed:x").is_err());
    }

    #[test]
    fn config_file_overrides_defaults() {
        let text = "seed = 9\nbatch_size = 4\nimc = false\nwidths = [8, 16]\nstrides = [2, 2]\nscales = [1.0]\nsinkhorn_epsilon = 0.05\n";
        let file: FileConfig = toml::from_str(text).unwrap();
        let mut cfg = TrainConfig::default();
        file.apply_train(&mut cfg);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.batch_size, 4);
        assert!(!cfg.flags.imc);
        assert_eq!(cfg.scales, vec![1.0]);
        assert_eq!(cfg.sinkhorn.epsilon, 0.05);
        let mut enc = EncoderConfig::default();
        file.apply_encoder(&mut enc);
        assert_eq!(enc.widths, vec![8, 16]);
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "no_such_key = 1\n").unwrap();
        match FileConfig::load(Some(&path)) {
            Err(CliError::Usage(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn exit_codes_are_distinct() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::Data(String::new()).exit_code(), 3);
        assert_eq!(CliError::Diverged(String::new()).exit_code(), 4);
    }
}
