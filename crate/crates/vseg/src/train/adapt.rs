//! Unsupervised adversarial domain adaptation.
//!
//! The pretrained segmentation network plays generator against a fresh
//! discriminator trained to separate real source label maps from
//! segmentations of target images. Each cycle:
//!
//! - the discriminator minimizes `bce(D(onehot(y_src)), real)` plus
//!   `bce(D(softmax(S(x_tgt))), fake)` with the segmenter frozen;
//! - the segmenter minimizes the non-saturating surrogate
//!   `bce(D(softmax(S(x_tgt))), real)` with the discriminator frozen.
//!
//! No supervised term is ever computed for updates, and target labels are
//! never read by the loop: an optional target label file is consulted only
//! when logging the reported Jaccard column, so its presence or absence
//! cannot change a single checkpoint byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    evaluate_slices_standalone, sample_image_crops, sample_label_crops, split_slices, TrainError,
};
use crate::models::{
    bind_params, bind_params_frozen, build_discriminator, collect_grads, disc_forward,
    load_checkpoint, save_checkpoint, unet_forward, DiscConfig, ModelParams, UNetConfig,
};
use crate::tensor::{OptKind, OptimizerState, Shape, Tape};
use crate::volume::{export_pgm, get_slice, read_volume, Slice2D, Volume3D};
use crate::weights::binarize_labels;

/// Real one-hot maps are smoothed to 1-eps / eps/(C-1) so the discriminator
/// cannot win on hard-vs-soft value quantization alone.
pub const LABEL_SMOOTHING: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub source_images: PathBuf,
    pub source_labels: PathBuf,
    /// Target image volume; the adaptation loop receives no target labels.
    pub target_images: PathBuf,
    /// Optional target label volume consulted at reporting time only. When
    /// the file does not exist the reported Jaccard column is -1.
    pub target_labels: Option<PathBuf>,
    /// Pretrained segmentation checkpoint (the M3 model).
    pub pretrained: PathBuf,
    pub out_dir: PathBuf,
    pub d_lr: f32,
    pub g_lr: f32,
    /// Discriminator updates per cycle.
    pub d_steps: usize,
    /// Generator updates per cycle.
    pub g_steps: usize,
    /// Cycles per epoch.
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub opt: OptKind,
    pub seed: u64,
    /// Trailing slice fraction held out for the discriminator probe set.
    pub val_frac: f32,
    pub boundary_class: u8,
}

impl AdaptConfig {
    pub fn new(
        source_images: impl Into<PathBuf>,
        source_labels: impl Into<PathBuf>,
        target_images: impl Into<PathBuf>,
        pretrained: impl Into<PathBuf>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        let target_images = target_images.into();
        let target_labels = Some(default_target_labels_path(&target_images));
        Self {
            source_images: source_images.into(),
            source_labels: source_labels.into(),
            target_images,
            target_labels,
            pretrained: pretrained.into(),
            out_dir: out_dir.into(),
            d_lr: 1e-4,
            g_lr: 1e-4,
            d_steps: 1,
            g_steps: 1,
            steps_per_epoch: 16,
            epochs: 5,
            batch: 2,
            crop: 64,
            opt: OptKind::Adam,
            seed: 42,
            val_frac: 0.1,
            boundary_class: 1,
        }
    }

    /// Manifest key=value pairs.
    pub fn to_kv_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("images".into(), self.source_images.display().to_string()),
            ("labels".into(), self.source_labels.display().to_string()),
            (
                "target_images".into(),
                self.target_images.display().to_string(),
            ),
            (
                "base_checkpoint".into(),
                self.pretrained.display().to_string(),
            ),
            ("out".into(), self.out_dir.display().to_string()),
            ("d_lr".into(), self.d_lr.to_string()),
            ("g_lr".into(), self.g_lr.to_string()),
            ("d_steps".into(), self.d_steps.to_string()),
            ("g_steps".into(), self.g_steps.to_string()),
            ("steps_per_epoch".into(), self.steps_per_epoch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("crop".into(), self.crop.to_string()),
            (
                "opt".into(),
                match self.opt {
                    OptKind::Sgd => "sgd".into(),
                    OptKind::Adam => "adam".into(),
                },
            ),
            ("seed".into(), self.seed.to_string()),
            ("val_frac".into(), self.val_frac.to_string()),
            ("boundary_class".into(), self.boundary_class.to_string()),
        ]
    }
}

/// Conventional sibling path probed for reporting-only target labels.
pub fn default_target_labels_path(target_images: &Path) -> PathBuf {
    let mut s = target_images.as_os_str().to_os_string();
    s.push(".labels");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptEpochRow {
    pub epoch: usize,
    /// Mean discriminator loss on real source maps (L2).
    pub d_loss_real: f64,
    /// Mean discriminator loss on generated target maps (L3).
    pub d_loss_fake: f64,
    /// Mean generator (segmenter) loss.
    pub g_loss: f64,
    /// Discriminator accuracy on the held-out probe set.
    pub d_probe_acc: f64,
    /// Boundary Jaccard on target slices, or -1 when target labels are
    /// absent. Reporting only; never used for gradients.
    pub tgt_jaccard_boundary: f32,
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub adapted_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub epochs: Vec<AdaptEpochRow>,
}

const ADAPT_STREAM: u64 = 0xada9_17f3_0b5c_0002;
const DISC_SEED_STREAM: u64 = 0xd15c_0000_0000_0003;

/// One-hot label crops smoothed to a valid probability map.
fn smoothed_onehot(targets: &[u8], n: usize, classes: usize, side: usize) -> Vec<f32> {
    let plane = side * side;
    let hot = (1.0 - LABEL_SMOOTHING) as f32;
    let cold = (LABEL_SMOOTHING / (classes - 1) as f64) as f32;
    let mut out = vec![cold; n * classes * plane];
    for s in 0..n {
        for p in 0..plane {
            let c = targets[s * plane + p] as usize;
            out[(s * classes + c) * plane + p] = hot;
        }
    }
    out
}

/// Segmentation probabilities for image crops, computed on a throwaway tape
/// (no gradients flow back into the segmenter).
fn fake_prob_map(
    seg: &ModelParams,
    seg_cfg: &UNetConfig,
    crops: &[f32],
    n: usize,
    side: usize,
) -> Result<Vec<f32>, TrainError> {
    let mut tape = Tape::new();
    let bound = bind_params_frozen(&mut tape, seg);
    let x = tape.constant(Shape::new(n, 1, side, side), crops.to_vec())?;
    let logits = unet_forward(&mut tape, &bound, seg_cfg, x)?;
    let probs = tape.softmax_channels(logits)?;
    Ok(tape.value(probs).iter().map(|&v| v as f32).collect())
}

struct ProbeSets {
    /// Real probability maps from held-out source label slices.
    real: Vec<Vec<f32>>,
    /// Held-out target image slices (center crops).
    target_crops: Vec<Vec<f32>>,
    side: usize,
}

fn center_crop(plane: &[f32], y: usize, x: usize, side: usize) -> Vec<f32> {
    let oy = (y - side) / 2;
    let ox = (x - side) / 2;
    let mut out = Vec::with_capacity(side * side);
    for cy in 0..side {
        let row = (oy + cy) * x + ox;
        out.extend_from_slice(&plane[row..row + side]);
    }
    out
}

fn center_crop_labels(plane: &[u8], y: usize, x: usize, side: usize) -> Vec<u8> {
    let oy = (y - side) / 2;
    let ox = (x - side) / 2;
    let mut out = Vec::with_capacity(side * side);
    for cy in 0..side {
        let row = (oy + cy) * x + ox;
        out.extend_from_slice(&plane[row..row + side]);
    }
    out
}

/// Adapts a pretrained segmentation network to an unlabeled target volume.
pub fn adapt_adversarial(cfg: &AdaptConfig) -> Result<AdaptOutcome, TrainError> {
    if cfg.batch == 0 || cfg.crop < DiscConfig::MIN_SIDE {
        return Err(TrainError::BadConfig(format!(
            "batch must be >= 1 and crop >= {}",
            DiscConfig::MIN_SIDE
        )));
    }
    let mut seg = load_checkpoint(&cfg.pretrained)
        .map_err(|e| TrainError::MissingPretrained(e.to_string()))?;
    let seg_cfg = UNetConfig::from_params(&seg)?;
    let classes = seg_cfg.num_classes;
    if cfg.crop % seg_cfg.spatial_divisor() != 0 {
        return Err(TrainError::BadConfig(format!(
            "crop {} must be a multiple of {}",
            cfg.crop,
            seg_cfg.spatial_divisor()
        )));
    }

    // Source data; labels binarized when adapting a binary model.
    let source_images = read_volume(&cfg.source_images)?;
    let source_labels_raw = read_volume(&cfg.source_labels)?;
    if source_images.dims() != source_labels_raw.dims() {
        return Err(TrainError::BadConfig(
            "source image and label dims differ".into(),
        ));
    }
    let source_labels = if classes == 2 {
        binarize_volume(&source_labels_raw, cfg.boundary_class)?
    } else {
        source_labels_raw
    };
    let target_images = read_volume(&cfg.target_images)?;
    if target_images.as_scalars().is_none() || source_images.as_scalars().is_none() {
        return Err(TrainError::BadConfig(
            "image volumes must be f32 scalars".into(),
        ));
    }
    let (sz, sy, sx) = source_images.dims();
    let (tz, ty, tx) = target_images.dims();
    if cfg.crop > sy.min(sx) || cfg.crop > ty.min(tx) {
        return Err(TrainError::CropLargerThanSlice {
            crop: cfg.crop,
            h: sy.min(ty),
            w: sx.min(tx),
        });
    }

    let (src_train, src_probe) = split_slices(sz, cfg.val_frac);
    let (tgt_train, tgt_probe) = split_slices(tz, cfg.val_frac);
    let src_probe = if src_probe.is_empty() { src_train.clone() } else { src_probe };
    let tgt_probe = if tgt_probe.is_empty() { tgt_train.clone() } else { tgt_probe };

    // Fixed probe inputs: center crops of held-out slices.
    let probes = {
        let labels = source_labels.as_labels().unwrap();
        let timgs = target_images.as_scalars().unwrap();
        let real = src_probe
            .iter()
            .map(|&zi| {
                let crop =
                    center_crop_labels(&labels[zi * sy * sx..(zi + 1) * sy * sx], sy, sx, cfg.crop);
                smoothed_onehot(&crop, 1, classes, cfg.crop)
            })
            .collect();
        let target_crops = tgt_probe
            .iter()
            .map(|&zi| center_crop(&timgs[zi * ty * tx..(zi + 1) * ty * tx], ty, tx, cfg.crop))
            .collect();
        ProbeSets {
            real,
            target_crops,
            side: cfg.crop,
        }
    };

    let disc_cfg = DiscConfig::new(classes);
    let mut disc = build_discriminator(&disc_cfg, cfg.seed ^ DISC_SEED_STREAM)?;
    let mut d_opt = OptimizerState::new(cfg.opt, cfg.d_lr);
    let mut g_opt = OptimizerState::new(cfg.opt, cfg.g_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ADAPT_STREAM);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut rows: Vec<AdaptEpochRow> = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut l2_sum = 0f64;
        let mut l3_sum = 0f64;
        let mut g_sum = 0f64;
        let mut d_updates = 0usize;
        let mut g_updates = 0usize;

        for _ in 0..cfg.steps_per_epoch {
            for _ in 0..cfg.d_steps {
                // Real source label crops and fake target segmentations.
                let label_crops = sample_label_crops(
                    &source_labels,
                    &src_train,
                    cfg.batch,
                    cfg.crop,
                    &mut rng,
                );
                let real = smoothed_onehot(&label_crops, cfg.batch, classes, cfg.crop);
                let image_crops = sample_image_crops(
                    &target_images,
                    &tgt_train,
                    cfg.batch,
                    cfg.crop,
                    &mut rng,
                );
                let fake = fake_prob_map(&seg, &seg_cfg, &image_crops, cfg.batch, cfg.crop)?;

                let mut tape = Tape::new();
                let bound = bind_params(&mut tape, &disc);
                let shape = Shape::new(cfg.batch, classes, cfg.crop, cfg.crop);
                let real_v = tape.constant(shape, real)?;
                let fake_v = tape.constant(shape, fake)?;
                let real_logits = disc_forward(&mut tape, &bound, &disc_cfg, real_v)?;
                let fake_logits = disc_forward(&mut tape, &bound, &disc_cfg, fake_v)?;
                let l2 = tape.bce_with_logits(real_logits, 1.0)?;
                let l3 = tape.bce_with_logits(fake_logits, 0.0)?;
                let loss = tape.add(l2, l3)?;
                let grads = tape.backward(loss)?;
                collect_grads(&grads, &bound, &mut disc);
                d_opt.step(disc.iter_mut())?;
                l2_sum += tape.scalar_value(l2);
                l3_sum += tape.scalar_value(l3);
                d_updates += 1;
            }
            for _ in 0..cfg.g_steps {
                // Non-saturating generator objective, discriminator frozen.
                let image_crops = sample_image_crops(
                    &target_images,
                    &tgt_train,
                    cfg.batch,
                    cfg.crop,
                    &mut rng,
                );
                let mut tape = Tape::new();
                let seg_bound = bind_params(&mut tape, &seg);
                let disc_bound = bind_params_frozen(&mut tape, &disc);
                let x = tape.constant(
                    Shape::new(cfg.batch, 1, cfg.crop, cfg.crop),
                    image_crops,
                )?;
                let logits = unet_forward(&mut tape, &seg_bound, &seg_cfg, x)?;
                let probs = tape.softmax_channels(logits)?;
                let d_logits = disc_forward(&mut tape, &disc_bound, &disc_cfg, probs)?;
                let g_loss = tape.bce_with_logits(d_logits, 1.0)?;
                let grads = tape.backward(g_loss)?;
                collect_grads(&grads, &seg_bound, &mut seg);
                g_opt.step(seg.iter_mut())?;
                g_sum += tape.scalar_value(g_loss);
                g_updates += 1;
            }
        }

        let d_probe_acc = probe_accuracy(&seg, &seg_cfg, &disc, &disc_cfg, &probes)?;
        let tgt_jaccard = report_target_jaccard(cfg, &seg, &seg_cfg, &target_images, &tgt_probe)?;
        emit_epoch_pgm(cfg, &seg, &seg_cfg, &target_images, epoch)?;

        rows.push(AdaptEpochRow {
            epoch,
            d_loss_real: if d_updates > 0 { l2_sum / d_updates as f64 } else { 0.0 },
            d_loss_fake: if d_updates > 0 { l3_sum / d_updates as f64 } else { 0.0 },
            g_loss: if g_updates > 0 { g_sum / g_updates as f64 } else { 0.0 },
            d_probe_acc,
            tgt_jaccard_boundary: tgt_jaccard,
        });
    }

    let adapted = cfg.out_dir.join("adapted.unck");
    save_checkpoint(&seg, &adapted)?;
    let csv = cfg.out_dir.join("metrics.csv");
    write_adapt_csv(&csv, &rows)?;
    Ok(AdaptOutcome {
        adapted_checkpoint: adapted,
        metrics_csv: csv,
        epochs: rows,
    })
}

fn binarize_volume(labels: &Volume3D, boundary_class: u8) -> Result<Volume3D, TrainError> {
    let (z, y, x) = labels.dims();
    let mut data = Vec::with_capacity(z * y * x);
    for zi in 0..z {
        let slice = get_slice(labels, zi)?;
        data.extend_from_slice(binarize_labels(&slice, boundary_class)?.data());
    }
    Ok(Volume3D::labels((z, y, x), 2, data)?)
}

/// Fraction of probe inputs the discriminator classifies correctly
/// (real source maps as positive logits, current segmentations of target
/// probes as non-positive).
fn probe_accuracy(
    seg: &ModelParams,
    seg_cfg: &UNetConfig,
    disc: &ModelParams,
    disc_cfg: &DiscConfig,
    probes: &ProbeSets,
) -> Result<f64, TrainError> {
    let logit_of = |input: Vec<f32>, classes: usize, side: usize, disc: &ModelParams| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let bound = bind_params_frozen(&mut tape, disc);
        let v = tape.constant(Shape::new(1, classes, side, side), input)?;
        let logit = disc_forward(&mut tape, &bound, disc_cfg, v)?;
        Ok(tape.value(logit)[0] as f64)
    };
    let mut correct = 0usize;
    let mut total = 0usize;
    for real in &probes.real {
        if logit_of(real.clone(), disc_cfg.in_channels, probes.side, disc)? > 0.0 {
            correct += 1;
        }
        total += 1;
    }
    for crop in &probes.target_crops {
        let fake = fake_prob_map(seg, seg_cfg, crop, 1, probes.side)?;
        if logit_of(fake, disc_cfg.in_channels, probes.side, disc)? <= 0.0 {
            correct += 1;
        }
        total += 1;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Reported target Jaccard: reads the optional label file at reporting time
/// only; -1 when absent. Consumes no randomness and touches no training
/// state, so checkpoints cannot depend on it.
fn report_target_jaccard(
    cfg: &AdaptConfig,
    seg: &ModelParams,
    seg_cfg: &UNetConfig,
    target_images: &Volume3D,
    probe_slices: &[usize],
) -> Result<f32, TrainError> {
    let Some(path) = cfg.target_labels.as_ref().filter(|p| p.exists()) else {
        return Ok(-1.0);
    };
    let labels = read_volume(path)?;
    if labels.dims() != target_images.dims() || labels.as_labels().is_none() {
        return Ok(-1.0);
    }
    let labels = if seg_cfg.num_classes == 2 {
        binarize_volume(&labels, cfg.boundary_class)?
    } else {
        labels
    };
    let (per_class, _) =
        evaluate_slices_standalone(seg, seg_cfg, target_images, &labels, probe_slices)?;
    Ok(per_class.get(1).copied().unwrap_or(-1.0))
}

/// Predicted label map of the first target slice, rescaled for inspection.
fn emit_epoch_pgm(
    cfg: &AdaptConfig,
    seg: &ModelParams,
    seg_cfg: &UNetConfig,
    target_images: &Volume3D,
    epoch: usize,
) -> Result<(), TrainError> {
    let (_, y, x) = target_images.dims();
    if y % seg_cfg.spatial_divisor() != 0 || x % seg_cfg.spatial_divisor() != 0 {
        return Ok(());
    }
    let plane = &target_images.as_scalars().unwrap()[..y * x];
    let pred = super::predict_plane(seg, seg_cfg, plane, y, x)?;
    let scale = 255 / (seg_cfg.num_classes.max(2) - 1) as u32;
    let scaled: Vec<u8> = pred.iter().map(|&v| (v as u32 * scale) as u8).collect();
    let slice = Slice2D::labels((y, x), 0, scaled)?;
    export_pgm(&slice, cfg.out_dir.join(format!("epoch_{epoch:03}.pgm")))?;
    Ok(())
}

fn write_adapt_csv(path: &Path, rows: &[AdaptEpochRow]) -> Result<(), std::io::Error> {
    let mut out =
        String::from("epoch,d_loss_real,d_loss_fake,g_loss,d_probe_acc,tgt_jaccard_boundary\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.d_loss_real, r.d_loss_fake, r.g_loss, r.d_probe_acc, r.tgt_jaccard_boundary
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_unet;
    use crate::synth::{generate, ClassMode, DomainStyle, SynthConfig};
    use crate::volume::write_volume;
    use tempfile::TempDir;

    fn setup(dir: &TempDir) -> AdaptConfig {
        let src = SynthConfig {
            dims: (4, 32, 32),
            mode: ClassMode::Binary,
            style: DomainStyle::Source,
            ..SynthConfig::default()
        };
        let tgt = SynthConfig {
            style: DomainStyle::Target,
            seed: 7,
            ..src.clone()
        };
        let (si, sl) = generate(&src).unwrap();
        let (ti, tl) = generate(&tgt).unwrap();
        let sip = dir.path().join("src_images.vseg");
        let slp = dir.path().join("src_labels.vseg");
        let tip = dir.path().join("tgt_images.vseg");
        write_volume(&si, &sip).unwrap();
        write_volume(&sl, &slp).unwrap();
        write_volume(&ti, &tip).unwrap();
        write_volume(&tl, default_target_labels_path(&tip)).unwrap();

        let seg_cfg = UNetConfig {
            num_classes: 2,
            depth: 2,
            base_channels: 4,
            ..UNetConfig::default()
        };
        let seg = build_unet(&seg_cfg, 99).unwrap();
        let ckpt = dir.path().join("m3.unck");
        save_checkpoint(&seg, &ckpt).unwrap();

        let mut cfg = AdaptConfig::new(sip, slp, tip, ckpt, dir.path().join("out"));
        cfg.crop = 32;
        cfg.batch = 1;
        cfg.steps_per_epoch = 2;
        cfg.epochs = 1;
        cfg.val_frac = 0.25;
        cfg
    }

    #[test]
    fn zero_epochs_returns_the_input_checkpoint() {
        let dir = TempDir::new().unwrap();
        let mut cfg = setup(&dir);
        cfg.epochs = 0;
        let out = adapt_adversarial(&cfg).unwrap();
        assert_eq!(
            std::fs::read(&out.adapted_checkpoint).unwrap(),
            std::fs::read(&cfg.pretrained).unwrap()
        );
    }

    #[test]
    fn fresh_discriminator_losses_start_near_ln2() {
        let dir = TempDir::new().unwrap();
        let mut cfg = setup(&dir);
        cfg.epochs = 1;
        cfg.steps_per_epoch = 1;
        let out = adapt_adversarial(&cfg).unwrap();
        let row = &out.epochs[0];
        let ln2 = std::f64::consts::LN_2;
        assert!((row.d_loss_real - ln2).abs() < 0.2, "L2 {}", row.d_loss_real);
        assert!((row.d_loss_fake - ln2).abs() < 0.2, "L3 {}", row.d_loss_fake);
        assert!(row.tgt_jaccard_boundary >= 0.0);
        assert!(out.metrics_csv.exists());
    }

    #[test]
    fn target_labels_never_influence_checkpoints() {
        let dir = TempDir::new().unwrap();
        let cfg = setup(&dir);
        let out_with = adapt_adversarial(&cfg).unwrap();
        let with_bytes = std::fs::read(&out_with.adapted_checkpoint).unwrap();
        let with_rows = out_with.epochs.clone();

        // Delete the (unused) label file and rerun with identical seeds.
        std::fs::remove_file(default_target_labels_path(&cfg.target_images)).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = dir.path().join("out2");
        let out_without = adapt_adversarial(&cfg2).unwrap();
        assert_eq!(
            with_bytes,
            std::fs::read(&out_without.adapted_checkpoint).unwrap()
        );
        assert_eq!(out_without.epochs[0].tgt_jaccard_boundary, -1.0);
        // Everything except the reporting column matches.
        assert_eq!(with_rows[0].d_probe_acc, out_without.epochs[0].d_probe_acc);
        assert_eq!(with_rows[0].g_loss, out_without.epochs[0].g_loss);
    }

    #[test]
    fn epoch_pgms_are_emitted() {
        let dir = TempDir::new().unwrap();
        let cfg = setup(&dir);
        adapt_adversarial(&cfg).unwrap();
        assert!(cfg.out_dir.join("epoch_000.pgm").exists());
    }
}
