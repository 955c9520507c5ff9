//! Experiment drivers.
//!
//! [`train_supervised`] runs weighted-cross-entropy training of the UNet on
//! labeled volumes with a per-pixel weight scheme. [`finetune_binary`]
//! transfers a trained backbone into a 2-class network (head reinitialized),
//! trains on binarized labels, and can append a photometric-jitter hardening
//! phase. [`adapt_adversarial`] (in [`adapt`]) adapts a trained binary
//! network to an unlabeled target volume against a discriminator.
//!
//! Every run is a pure function of its config: sampling, initialization and
//! augmentation all derive from the config seed, and reruns produce bitwise
//! identical checkpoints and metric logs.

pub mod adapt;

pub use adapt::{adapt_adversarial, AdaptConfig, AdaptEpochRow, AdaptOutcome};

use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::MetricsError;
use crate::models::{
    bind_params, build_unet, collect_grads, load_checkpoint_partial, save_checkpoint, ModelError,
    ModelParams, PartialLoadReport, UNetConfig,
};
use crate::tensor::{OptKind, OptimizerState, Shape, Tape, Tensor, TensorError};
use crate::volume::{get_slice, read_volume, write_volume, Slice2D, Volume3D, VolumeError};
use crate::weights::{
    binarize_labels, distance_transform, entropy_map, fixed_ratio_weights, gaussian_smooth,
    normalize_weights, WeightError, WeightMap2D,
};

/// Floor applied by weight normalization before every run.
pub const WEIGHT_FLOOR: f32 = 0.05;

/// Epochs appended by the jitter-hardening phase of binary fine-tuning.
pub const JITTER_PHASE_EPOCHS: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("crop {crop} larger than slice {h}x{w}")]
    CropLargerThanSlice { crop: usize, h: usize, w: usize },
    #[error("loss diverged at step {step}; state saved to {}", saved.display())]
    DivergedLoss { step: usize, saved: PathBuf },
    #[error("missing or unreadable pretrained checkpoint: {0}")]
    MissingPretrained(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Per-pixel weight scheme applied to the cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Neighborhood label entropy.
    Entropy,
    /// Smoothed distance transform of the boundary mask.
    Distance,
    /// Fixed boundary:rest ratio.
    Ratio(f32),
    Uniform,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Entropy => write!(f, "entropy"),
            Scheme::Distance => write!(f, "distance"),
            Scheme::Ratio(_) => write!(f, "ratio"),
            Scheme::Uniform => write!(f, "uniform"),
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    /// Parses the scheme name; `ratio` defaults to 5:1 until a ratio value
    /// is applied on top.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "entropy" => Ok(Scheme::Entropy),
            "distance" => Ok(Scheme::Distance),
            "ratio" => Ok(Scheme::Ratio(5.0)),
            "uniform" => Ok(Scheme::Uniform),
            other => Err(format!(
                "unknown scheme '{other}' (expected entropy|distance|ratio|uniform)"
            )),
        }
    }
}

/// Full experiment description; serializes to the key=value manifest format.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub weights: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub scheme: Scheme,
    pub classes: usize,
    pub batch: usize,
    pub crop: usize,
    /// Epochs over the training slice set.
    pub iters: usize,
    pub lr: f32,
    pub opt: OptKind,
    pub seed: u64,
    pub jitter: bool,
    /// Fraction of slices held out for validation, taken from the end of
    /// the stack.
    pub val_frac: f32,
    /// Entropy-scheme window.
    pub window: usize,
    /// Distance-scheme Gaussian sigma.
    pub sigma: f32,
    pub boundary_class: u8,
    pub depth: usize,
    pub base_channels: usize,
}

impl TrainConfig {
    pub fn new(
        images: impl Into<PathBuf>,
        labels: impl Into<PathBuf>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            images: images.into(),
            labels: labels.into(),
            weights: None,
            out_dir: out_dir.into(),
            scheme: Scheme::Uniform,
            classes: 4,
            batch: 2,
            crop: 64,
            iters: 1,
            lr: 1e-4,
            opt: OptKind::Adam,
            seed: 42,
            jitter: false,
            val_frac: 0.1,
            window: 5,
            sigma: 10.0,
            boundary_class: 1,
            depth: 3,
            base_channels: 16,
        }
    }

    pub fn model_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            num_classes: self.classes,
            depth: self.depth,
            base_channels: self.base_channels,
            kernel: 3,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let div = 1usize << (self.depth.saturating_sub(1));
        if self.depth < 1 || self.crop == 0 || self.crop % div != 0 {
            return Err(TrainError::BadConfig(format!(
                "crop {} must be a positive multiple of {}",
                self.crop, div
            )));
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(TrainError::BadConfig("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(TrainError::BadConfig(
                "val_frac must be in [0, 1)".into(),
            ));
        }
        if let Scheme::Ratio(r) = self.scheme {
            if !(r > 0.0) {
                return Err(TrainError::BadConfig("ratio must be positive".into()));
            }
        }
        Ok(())
    }

    /// Fully resolved config as manifest key=value pairs.
    pub fn to_kv_pairs(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("images".into(), self.images.display().to_string()),
            ("labels".into(), self.labels.display().to_string()),
            (
                "weights".into(),
                self.weights
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("out".into(), self.out_dir.display().to_string()),
            ("scheme".into(), self.scheme.to_string()),
            (
                "ratio".into(),
                match self.scheme {
                    Scheme::Ratio(r) => r.to_string(),
                    _ => String::new(),
                },
            ),
            ("classes".into(), self.classes.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("crop".into(), self.crop.to_string()),
            ("iters".into(), self.iters.to_string()),
            ("lr".into(), self.lr.to_string()),
            (
                "opt".into(),
                match self.opt {
                    OptKind::Sgd => "sgd".into(),
                    OptKind::Adam => "adam".into(),
                },
            ),
            ("seed".into(), self.seed.to_string()),
            ("jitter".into(), if self.jitter { "on" } else { "off" }.into()),
            ("val_frac".into(), self.val_frac.to_string()),
            ("window".into(), self.window.to_string()),
            ("sigma".into(), self.sigma.to_string()),
            ("boundary_class".into(), self.boundary_class.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
        ];
        kv.retain(|(_, v)| !v.is_empty());
        kv
    }

    /// Applies one manifest key; unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |what: &str| TrainError::BadConfig(format!("bad {what} value '{value}'"));
        match key {
            "images" => self.images = value.into(),
            "labels" => self.labels = value.into(),
            "weights" => self.weights = Some(value.into()),
            "out" => self.out_dir = value.into(),
            "scheme" => {
                let parsed: Scheme = value.parse().map_err(TrainError::BadConfig)?;
                self.scheme = match (parsed, self.scheme) {
                    // keep a previously applied ratio value
                    (Scheme::Ratio(_), Scheme::Ratio(r)) => Scheme::Ratio(r),
                    (s, _) => s,
                };
            }
            "ratio" => {
                let r: f32 = value.parse().map_err(|_| bad("ratio"))?;
                self.scheme = Scheme::Ratio(r);
            }
            "classes" => self.classes = value.parse().map_err(|_| bad("classes"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("batch"))?,
            "crop" => self.crop = value.parse().map_err(|_| bad("crop"))?,
            "iters" => self.iters = value.parse().map_err(|_| bad("iters"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "opt" => {
                self.opt = match value {
                    "sgd" => OptKind::Sgd,
                    "adam" => OptKind::Adam,
                    _ => return Err(bad("opt")),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "jitter" => {
                self.jitter = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad("jitter")),
                }
            }
            "val_frac" => self.val_frac = value.parse().map_err(|_| bad("val_frac"))?,
            "window" => self.window = value.parse().map_err(|_| bad("window"))?,
            "sigma" => self.sigma = value.parse().map_err(|_| bad("sigma"))?,
            "boundary_class" => {
                self.boundary_class = value.parse().map_err(|_| bad("boundary_class"))?
            }
            "depth" => self.depth = value.parse().map_err(|_| bad("depth"))?,
            "base_channels" => {
                self.base_channels = value.parse().map_err(|_| bad("base_channels"))?
            }
            other => {
                return Err(TrainError::BadConfig(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Reads a key=value config file (the manifest format); `#` lines and
    /// blank lines are skipped.
    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::new("", "", "");
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::BadConfig(format!("bad config line '{line}'"))
            })?;
            if key == "command" {
                continue;
            }
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

/// Writes the run manifest: one key=value per line, deterministic order.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    pairs: &[(String, String)],
) -> Result<PathBuf, io::Error> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("manifest.txt");
    let mut text = format!("command={command}\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(&path, text)?;
    Ok(path)
}

// ---- data loading -----------------------------------------------------------

pub(crate) struct TrainData {
    pub images: Volume3D,
    pub labels: Volume3D,
    /// Per-slice normalized weight maps.
    pub weight_maps: Vec<WeightMap2D>,
    pub train_slices: Vec<usize>,
    pub val_slices: Vec<usize>,
}

impl TrainData {
    pub fn slice_dims(&self) -> (usize, usize) {
        let (_, y, x) = self.images.dims();
        (y, x)
    }
}

/// Trailing-tail validation split: floor(frac * z) slices from the end.
pub(crate) fn split_slices(z: usize, val_frac: f32) -> (Vec<usize>, Vec<usize>) {
    let val_count = (val_frac as f64 * z as f64).floor() as usize;
    let train_count = z - val_count;
    ((0..train_count).collect(), (train_count..z).collect())
}

/// Weight map for one label slice under `scheme`, floored and normalized to
/// mean 1.
pub fn scheme_weight_map(
    labels: &Slice2D,
    scheme: Scheme,
    window: usize,
    sigma: f32,
    boundary_class: u8,
) -> Result<WeightMap2D, WeightError> {
    let raw = match scheme {
        Scheme::Uniform => WeightMap2D::new(labels.dims(), vec![1.0; labels.dims().0 * labels.dims().1])?,
        Scheme::Entropy => entropy_map(labels, window)?,
        Scheme::Distance => {
            let boundary = binarize_labels(labels, boundary_class)?;
            gaussian_smooth(&distance_transform(&boundary), sigma)?
        }
        Scheme::Ratio(r) => {
            let boundary = binarize_labels(labels, boundary_class)?;
            fixed_ratio_weights(&boundary, r)?
        }
    };
    Ok(normalize_weights(&raw, WEIGHT_FLOOR))
}

fn load_data(cfg: &TrainConfig, binarize: bool) -> Result<TrainData, TrainError> {
    let images = read_volume(&cfg.images)?;
    let mut labels = read_volume(&cfg.labels)?;
    if images.as_scalars().is_none() {
        return Err(TrainError::BadConfig(
            "image volume must be f32 scalars".into(),
        ));
    }
    if labels.as_labels().is_none() {
        return Err(TrainError::BadConfig("label volume must be u8 labels".into()));
    }
    if images.dims() != labels.dims() {
        return Err(TrainError::BadConfig(format!(
            "image dims {:?} != label dims {:?}",
            images.dims(),
            labels.dims()
        )));
    }
    let (z, y, x) = labels.dims();
    if binarize {
        let mut data = Vec::with_capacity(z * y * x);
        for zi in 0..z {
            let slice = get_slice(&labels, zi)?;
            data.extend_from_slice(binarize_labels(&slice, cfg.boundary_class)?.data());
        }
        labels = Volume3D::labels((z, y, x), 2, data)?;
    }
    if let Some(&bad) = labels
        .as_labels()
        .unwrap()
        .iter()
        .find(|&&v| (v as usize) >= cfg.classes)
    {
        return Err(TrainError::BadConfig(format!(
            "label {bad} out of range for {} classes",
            cfg.classes
        )));
    }

    let weight_maps: Vec<WeightMap2D> = match &cfg.weights {
        Some(path) => {
            let volume = read_volume(path)?;
            if volume.as_scalars().is_none() || volume.dims() != images.dims() {
                return Err(TrainError::BadConfig(
                    "weight volume must be f32 scalars with matching dims".into(),
                ));
            }
            (0..z)
                .map(|zi| {
                    let s = get_slice(&volume, zi)?;
                    let map = WeightMap2D::new((y, x), s.as_scalars().unwrap().to_vec())?;
                    Ok(normalize_weights(&map, WEIGHT_FLOOR))
                })
                .collect::<Result<_, TrainError>>()?
        }
        None => (0..z)
            .map(|zi| {
                let s = get_slice(&labels, zi)?;
                Ok(scheme_weight_map(
                    &s,
                    cfg.scheme,
                    cfg.window,
                    cfg.sigma,
                    cfg.boundary_class,
                )?)
            })
            .collect::<Result<_, TrainError>>()?,
    };

    let (train_slices, val_slices) = split_slices(z, cfg.val_frac);
    if train_slices.is_empty() {
        return Err(TrainError::BadConfig("no training slices left".into()));
    }
    Ok(TrainData {
        images,
        labels,
        weight_maps,
        train_slices,
        val_slices,
    })
}

// ---- sampling and augmentation ----------------------------------------------

pub(crate) struct Batch {
    pub x: Tensor<f32>,
    pub targets: Vec<u8>,
    pub weights: Vec<f64>,
}

/// Photometric jitter with explicit parameters:
/// `x' = clamp(gain * x + bias, 0, 1)`.
pub fn jitter_with(plane: &mut [f32], gain: f32, bias: f32) {
    for v in plane.iter_mut() {
        *v = (gain * *v + bias).clamp(0.0, 1.0);
    }
}

/// Random jitter, gain ~ U(0.85, 1.15) and bias ~ U(-0.1, 0.1) per call.
pub fn jitter(plane: &mut [f32], rng: &mut ChaCha8Rng) {
    let gain = rng.gen_range(0.85..1.15);
    let bias = rng.gen_range(-0.1..0.1);
    jitter_with(plane, gain, bias);
}

/// Uniformly samples training slices and crop offsets; deterministic under
/// the caller's RNG.
pub(crate) fn sample_batch(
    data: &TrainData,
    batch: usize,
    crop: usize,
    jitter_on: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, TrainError> {
    let (y, x) = data.slice_dims();
    if crop > y || crop > x {
        return Err(TrainError::CropLargerThanSlice { crop, h: y, w: x });
    }
    let images = data.images.as_scalars().unwrap();
    let labels = data.labels.as_labels().unwrap();
    let plane = y * x;

    let mut xdata = Vec::with_capacity(batch * crop * crop);
    let mut targets = Vec::with_capacity(batch * crop * crop);
    let mut weights = Vec::with_capacity(batch * crop * crop);
    for _ in 0..batch {
        let slice = data.train_slices[rng.gen_range(0..data.train_slices.len())];
        let oy = rng.gen_range(0..=y - crop);
        let ox = rng.gen_range(0..=x - crop);
        let start = xdata.len();
        for cy in 0..crop {
            let row = slice * plane + (oy + cy) * x + ox;
            xdata.extend_from_slice(&images[row..row + crop]);
            targets.extend_from_slice(&labels[row..row + crop]);
            let wrow = (oy + cy) * x + ox;
            weights.extend(
                data.weight_maps[slice].data()[wrow..wrow + crop]
                    .iter()
                    .map(|&w| f64::from(w)),
            );
        }
        if jitter_on {
            jitter(&mut xdata[start..], rng);
        }
    }
    Ok(Batch {
        x: Tensor::from_vec(Shape::new(batch, 1, crop, crop), xdata)?,
        targets,
        weights,
    })
}

/// Uniform slice/offset crops from a scalar volume.
pub(crate) fn sample_image_crops(
    volume: &Volume3D,
    slices: &[usize],
    batch: usize,
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let (_, y, x) = volume.dims();
    let data = volume.as_scalars().unwrap();
    let plane = y * x;
    let mut out = Vec::with_capacity(batch * crop * crop);
    for _ in 0..batch {
        let slice = slices[rng.gen_range(0..slices.len())];
        let oy = rng.gen_range(0..=y - crop);
        let ox = rng.gen_range(0..=x - crop);
        for cy in 0..crop {
            let row = slice * plane + (oy + cy) * x + ox;
            out.extend_from_slice(&data[row..row + crop]);
        }
    }
    out
}

/// Uniform slice/offset crops from a label volume.
pub(crate) fn sample_label_crops(
    volume: &Volume3D,
    slices: &[usize],
    batch: usize,
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let (_, y, x) = volume.dims();
    let data = volume.as_labels().unwrap();
    let plane = y * x;
    let mut out = Vec::with_capacity(batch * crop * crop);
    for _ in 0..batch {
        let slice = slices[rng.gen_range(0..slices.len())];
        let oy = rng.gen_range(0..=y - crop);
        let ox = rng.gen_range(0..=x - crop);
        for cy in 0..crop {
            let row = slice * plane + (oy + cy) * x + ox;
            out.extend_from_slice(&data[row..row + crop]);
        }
    }
    out
}

// ---- inference and evaluation -------------------------------------------------

/// Argmax prediction for one image plane.
pub fn predict_plane(
    params: &ModelParams,
    model_cfg: &UNetConfig,
    plane: &[f32],
    h: usize,
    w: usize,
) -> Result<Vec<u8>, TrainError> {
    let mut tape = Tape::new();
    let bound = crate::models::bind_params_frozen(&mut tape, params);
    let x = tape.constant(Shape::new(1, 1, h, w), plane.to_vec())?;
    let logits = crate::models::unet_forward(&mut tape, &bound, model_cfg, x)?;
    let v = tape.value(logits);
    let classes = model_cfg.num_classes;
    let mut out = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for c in 0..classes {
            let z = v[c * h * w + p];
            if z > best_v {
                best_v = z;
                best = c;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

/// Per-class Jaccard pooled over the given slices, plus the unweighted mean.
pub(crate) fn evaluate_slices(
    params: &ModelParams,
    model_cfg: &UNetConfig,
    data: &TrainData,
    slices: &[usize],
) -> Result<(Vec<f32>, f32), TrainError> {
    evaluate_slices_standalone(params, model_cfg, &data.images, &data.labels, slices)
}

/// [`evaluate_slices`] over explicit image and label volumes.
pub(crate) fn evaluate_slices_standalone(
    params: &ModelParams,
    model_cfg: &UNetConfig,
    images: &Volume3D,
    labels: &Volume3D,
    slices: &[usize],
) -> Result<(Vec<f32>, f32), TrainError> {
    let (_, y, x) = images.dims();
    let plane = y * x;
    let classes = model_cfg.num_classes;
    let images = images.as_scalars().unwrap();
    let labels = labels.as_labels().unwrap();
    let mut intersection = vec![0u64; classes];
    let mut union = vec![0u64; classes];
    for &zi in slices {
        let pred = predict_plane(params, model_cfg, &images[zi * plane..(zi + 1) * plane], y, x)?;
        let gt = &labels[zi * plane..(zi + 1) * plane];
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                intersection[p as usize] += 1;
                union[p as usize] += 1;
            } else {
                union[p as usize] += 1;
                union[g as usize] += 1;
            }
        }
    }
    let per_class: Vec<f32> = (0..classes)
        .map(|c| {
            if union[c] == 0 {
                1.0
            } else {
                (intersection[c] as f64 / union[c] as f64) as f32
            }
        })
        .collect();
    let mean = (per_class.iter().map(|&v| f64::from(v)).sum::<f64>() / classes as f64) as f32;
    Ok((per_class, mean))
}

// ---- the training loop ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_jaccard_mean: f32,
    pub val_jaccard: Vec<f32>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub epochs: Vec<EpochRow>,
    pub step_losses: Vec<f64>,
    pub partial_report: Option<PartialLoadReport>,
}

const SAMPLE_STREAM: u64 = 0x5eed_5a2b_11ce_0001;

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

struct LoopState<'a> {
    params: &'a mut ModelParams,
    opt: &'a mut OptimizerState,
    rng: &'a mut ChaCha8Rng,
    rows: Vec<EpochRow>,
    step_losses: Vec<f64>,
    best_mean: f32,
    global_step: usize,
}

fn run_epochs(
    state: &mut LoopState<'_>,
    model_cfg: &UNetConfig,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
    jitter_on: bool,
) -> Result<(), TrainError> {
    let (y, x) = data.slice_dims();
    let train_pixels = data.train_slices.len() * y * x;
    let steps_per_epoch = ceil_div(train_pixels, cfg.batch * cfg.crop * cfg.crop).max(1);
    let eval_slices: &[usize] = if data.val_slices.is_empty() {
        &data.train_slices
    } else {
        &data.val_slices
    };
    let best_path = cfg.out_dir.join("best.unck");

    for _ in 0..epochs {
        let epoch = state.rows.len();
        let mut loss_sum = 0f64;
        for _ in 0..steps_per_epoch {
            state.global_step += 1;
            let batch = sample_batch(data, cfg.batch, cfg.crop, jitter_on, state.rng)?;
            let mut step = || -> Result<f64, TensorError> {
                let mut tape = Tape::new();
                let bound = bind_params(&mut tape, state.params);
                let xv = tape.constant(batch.x.shape, batch.x.data.clone())?;
                let logits = crate::models::unet_forward(&mut tape, &bound, model_cfg, xv)
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => TensorError::Invalid(other.to_string()),
                    })?;
                let loss = tape.weighted_cross_entropy(logits, &batch.targets, &batch.weights)?;
                let grads = tape.backward(loss)?;
                collect_grads(&grads, &bound, state.params);
                Ok(tape.scalar_value(loss))
            };
            let loss = match step() {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(TensorError::NonFinite(_)) => {
                    let saved = cfg.out_dir.join("diverged.unck");
                    std::fs::create_dir_all(&cfg.out_dir)?;
                    save_checkpoint(state.params, &saved)?;
                    return Err(TrainError::DivergedLoss {
                        step: state.global_step,
                        saved,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            state.opt.step(state.params.iter_mut())?;
            state.step_losses.push(loss);
            loss_sum += loss;
        }

        let (per_class, mean) = evaluate_slices(state.params, model_cfg, data, eval_slices)?;
        if mean > state.best_mean {
            state.best_mean = mean;
            std::fs::create_dir_all(&cfg.out_dir)?;
            save_checkpoint(state.params, &best_path)?;
        }
        state.rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_jaccard_mean: mean,
            val_jaccard: per_class,
        });
    }
    Ok(())
}

fn write_metrics_csv(path: &Path, classes: usize, rows: &[EpochRow]) -> Result<(), io::Error> {
    let mut out = String::from("epoch,train_loss,val_jaccard_mean");
    for c in 0..classes {
        out.push_str(&format!(",val_jaccard_class_{c}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{}",
            row.epoch, row.train_loss, row.val_jaccard_mean
        ));
        for v in &row.val_jaccard {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

fn finish(
    cfg: &TrainConfig,
    mut state: LoopState<'_>,
    partial_report: Option<PartialLoadReport>,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let final_path = cfg.out_dir.join("final.unck");
    save_checkpoint(state.params, &final_path)?;
    let best_path = cfg.out_dir.join("best.unck");
    if !best_path.exists() {
        save_checkpoint(state.params, &best_path)?;
    }
    let csv_path = cfg.out_dir.join("metrics.csv");
    write_metrics_csv(&csv_path, cfg.classes, &state.rows)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        metrics_csv: csv_path,
        epochs: std::mem::take(&mut state.rows),
        step_losses: std::mem::take(&mut state.step_losses),
        partial_report,
    })
}

/// Supervised weighted-cross-entropy training from scratch.
///
/// Runs `cfg.iters` epochs, each of `ceil(train pixels / (batch * crop^2))`
/// optimizer steps; logs train loss and validation Jaccard per epoch and
/// saves best-validation and final checkpoints.
pub fn train_supervised(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let data = load_data(cfg, false)?;
    let model_cfg = cfg.model_config();
    let mut params = build_unet(&model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.opt, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLE_STREAM);
    let mut state = LoopState {
        params: &mut params,
        opt: &mut opt,
        rng: &mut rng,
        rows: Vec::new(),
        step_losses: Vec::new(),
        best_mean: f32::NEG_INFINITY,
        global_step: 0,
    };
    run_epochs(&mut state, &model_cfg, &data, cfg, cfg.iters, cfg.jitter)?;
    finish(cfg, state, None)
}

/// Binary fine-tuning from a pretrained checkpoint.
///
/// Builds a fresh 2-class network, transfers every matching entry from the
/// base checkpoint (the classifier head stays freshly initialized), trains
/// on binarized labels, and, when `cfg.jitter` is set, appends
/// [`JITTER_PHASE_EPOCHS`] epochs with random photometric jitter.
pub fn finetune_binary(
    base_checkpoint: impl AsRef<Path>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.classes != 2 {
        return Err(TrainError::BadConfig(
            "binary fine-tuning requires classes = 2".into(),
        ));
    }
    let data = load_data(cfg, true)?;
    let model_cfg = cfg.model_config();
    let mut params = build_unet(&model_cfg, cfg.seed)?;
    let report = load_checkpoint_partial(&mut params, base_checkpoint)?;
    let mut opt = OptimizerState::new(cfg.opt, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLE_STREAM);
    let mut state = LoopState {
        params: &mut params,
        opt: &mut opt,
        rng: &mut rng,
        rows: Vec::new(),
        step_losses: Vec::new(),
        best_mean: f32::NEG_INFINITY,
        global_step: 0,
    };
    run_epochs(&mut state, &model_cfg, &data, cfg, cfg.iters, false)?;
    if cfg.jitter {
        run_epochs(&mut state, &model_cfg, &data, cfg, JITTER_PHASE_EPOCHS, true)?;
    }
    finish(cfg, state, Some(report))
}

/// Writes a predicted label volume for every slice of `images`.
pub fn predict_volume(
    params: &ModelParams,
    model_cfg: &UNetConfig,
    images: &Volume3D,
) -> Result<Volume3D, TrainError> {
    let (z, y, x) = images.dims();
    let data = images
        .as_scalars()
        .ok_or_else(|| TrainError::BadConfig("image volume must be f32 scalars".into()))?;
    let plane = y * x;
    let mut out = Vec::with_capacity(z * plane);
    for zi in 0..z {
        out.extend(predict_plane(
            params,
            model_cfg,
            &data[zi * plane..(zi + 1) * plane],
            y,
            x,
        )?);
    }
    Ok(Volume3D::labels(
        (z, y, x),
        model_cfg.num_classes as u8,
        out,
    )?)
}

/// Convenience wrapper: predict a volume loaded from disk and write the
/// result next to the given output directory.
pub fn predict_to_file(
    checkpoint: impl AsRef<Path>,
    images_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let params = crate::models::load_checkpoint(checkpoint)
        .map_err(|e| TrainError::MissingPretrained(e.to_string()))?;
    let model_cfg = UNetConfig::from_params(&params)?;
    let images = read_volume(images_path)?;
    let pred = predict_volume(&params, &model_cfg, &images)?;
    write_volume(&pred, out_path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use tempfile::TempDir;

    fn synth_files(dir: &TempDir, cfg: &SynthConfig) -> (PathBuf, PathBuf) {
        let (images, labels) = generate(cfg).unwrap();
        let ip = dir.path().join("images.vseg");
        let lp = dir.path().join("labels.vseg");
        write_volume(&images, &ip).unwrap();
        write_volume(&labels, &lp).unwrap();
        (ip, lp)
    }

    fn small_cfg(dir: &TempDir, images: PathBuf, labels: PathBuf) -> TrainConfig {
        let mut cfg = TrainConfig::new(images, labels, dir.path().join("out"));
        cfg.classes = 4;
        cfg.crop = 32;
        cfg.batch = 1;
        cfg.iters = 1;
        cfg.depth = 2;
        cfg.base_channels = 4;
        cfg.val_frac = 0.25;
        cfg
    }

    #[test]
    fn split_holds_out_the_tail() {
        let (train, val) = split_slices(10, 0.1);
        assert_eq!(train, (0..9).collect::<Vec<_>>());
        assert_eq!(val, vec![9]);

        let (train, val) = split_slices(4, 0.1);
        assert_eq!(train.len(), 4);
        assert!(val.is_empty());
    }

    #[test]
    fn jitter_examples() {
        let mut plane = vec![0.2, 0.5, 0.9];
        jitter_with(&mut plane, 1.0, 0.0);
        assert_eq!(plane, vec![0.2, 0.5, 0.9]);

        let mut zeros = vec![0.0; 4];
        jitter_with(&mut zeros, 1.0, 0.1);
        assert!(zeros.iter().all(|&v| (v - 0.1).abs() < 1e-7));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut plane = vec![0.0, 0.37, 1.0];
        for _ in 0..20 {
            jitter(&mut plane, &mut rng);
            assert!(plane.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sample_batch_is_deterministic_and_respects_crops() {
        let dir = TempDir::new().unwrap();
        let synth = SynthConfig {
            dims: (4, 32, 32),
            ..SynthConfig::default()
        };
        let (ip, lp) = synth_files(&dir, &synth);
        let cfg = small_cfg(&dir, ip, lp);
        let data = load_data(&cfg, false).unwrap();

        // crop == slice size pins the offset at (0, 0)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&data, 1, 32, false, &mut rng).unwrap();
        let slice0 = &data.images.as_scalars().unwrap()[..32 * 32];
        let matches_any = (0..4).any(|s| {
            let plane = &data.images.as_scalars().unwrap()[s * 1024..(s + 1) * 1024];
            plane == b.x.data.as_slice()
        });
        assert!(matches_any);
        let _ = slice0;

        // same seed, same sequence
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let b1 = sample_batch(&data, 2, 16, true, &mut r1).unwrap();
            let b2 = sample_batch(&data, 2, 16, true, &mut r2).unwrap();
            assert_eq!(b1.x.data, b2.x.data);
            assert_eq!(b1.targets, b2.targets);
        }

        // oversized crop
        assert!(matches!(
            sample_batch(&data, 1, 64, false, &mut r1),
            Err(TrainError::CropLargerThanSlice { crop: 64, .. })
        ));
    }

    #[test]
    fn training_runs_and_is_reproducible() {
        let dir = TempDir::new().unwrap();
        let synth = SynthConfig {
            dims: (4, 32, 32),
            ..SynthConfig::default()
        };
        let (ip, lp) = synth_files(&dir, &synth);
        let mut cfg = small_cfg(&dir, ip, lp);
        cfg.iters = 2;
        cfg.scheme = Scheme::Entropy;

        let a = train_supervised(&cfg).unwrap();
        assert_eq!(a.epochs.len(), 2);
        assert!(a.epochs.iter().all(|r| r.train_loss.is_finite()));
        assert!(a.final_checkpoint.exists());
        assert!(a.best_checkpoint.exists());

        let csv_a = std::fs::read(&a.metrics_csv).unwrap();
        let b = train_supervised(&cfg).unwrap();
        let csv_b = std::fs::read(&b.metrics_csv).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(
            std::fs::read(&a.final_checkpoint).unwrap(),
            std::fs::read(&b.final_checkpoint).unwrap()
        );
    }

    #[test]
    fn uniform_scheme_matches_explicit_equal_weight_volume() {
        let dir = TempDir::new().unwrap();
        let synth = SynthConfig {
            dims: (3, 32, 32),
            ..SynthConfig::default()
        };
        let (ip, lp) = synth_files(&dir, &synth);

        let mut uniform = small_cfg(&dir, ip.clone(), lp.clone());
        uniform.iters = 2;
        uniform.scheme = Scheme::Uniform;
        uniform.out_dir = dir.path().join("u");

        // all-equal (but not 1.0) weight volume; normalization makes it uniform
        let wp = dir.path().join("w.vseg");
        write_volume(
            &Volume3D::scalars((3, 32, 32), vec![0.7; 3 * 32 * 32]).unwrap(),
            &wp,
        )
        .unwrap();
        let mut explicit = uniform.clone();
        explicit.weights = Some(wp);
        explicit.out_dir = dir.path().join("w");

        let a = train_supervised(&uniform).unwrap();
        let b = train_supervised(&explicit).unwrap();
        assert_eq!(a.step_losses.len(), b.step_losses.len());
        for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn finetune_reports_head_reinit_and_zero_iters_is_identity() {
        let dir = TempDir::new().unwrap();
        let synth = SynthConfig {
            dims: (3, 32, 32),
            ..SynthConfig::default()
        };
        let (ip, lp) = synth_files(&dir, &synth);

        // base: 4-class model, no training needed
        let mut base_cfg = small_cfg(&dir, ip.clone(), lp.clone());
        let base_params = build_unet(&base_cfg.model_config(), 77).unwrap();
        let base_path = dir.path().join("m1.unck");
        save_checkpoint(&base_params, &base_path).unwrap();

        base_cfg.classes = 2;
        base_cfg.iters = 0;
        base_cfg.scheme = Scheme::Distance;
        base_cfg.sigma = 2.0;
        base_cfg.out_dir = dir.path().join("ft");
        let out = finetune_binary(&base_path, &base_cfg).unwrap();
        let report = out.partial_report.unwrap();
        assert_eq!(report.reinitialized, vec!["head.w", "head.b"]);

        // zero fine-tune iterations: the final checkpoint equals the
        // partial-load result
        let mut expect = build_unet(&base_cfg.model_config(), base_cfg.seed).unwrap();
        load_checkpoint_partial(&mut expect, &base_path).unwrap();
        let got = crate::models::load_checkpoint(&out.final_checkpoint).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn kv_round_trip_preserves_config() {
        let dir = TempDir::new().unwrap();
        let mut cfg = TrainConfig::new("a.vseg", "b.vseg", "out");
        cfg.scheme = Scheme::Ratio(7.5);
        cfg.jitter = true;
        cfg.lr = 3e-4;
        cfg.seed = 1234;
        let pairs = cfg.to_kv_pairs();
        let manifest = write_manifest(dir.path(), "train", &pairs).unwrap();
        let back = TrainConfig::from_kv_file(&manifest).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let mut cfg = TrainConfig::new("a", "b", "c");
        assert!(matches!(
            cfg.apply_kv("bogus", "1"),
            Err(TrainError::BadConfig(_))
        ));
    }
}
