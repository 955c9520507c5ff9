//! Desk-scale volumetric segmentation toolkit.
//!
//! The crate covers the full pipeline for boundary segmentation of volumetric
//! microscopy-style data where the interesting class (the cell boundary) is a
//! thin, heavily outnumbered sliver of each slice:
//!
//! - [`volume`] — bit-exact binary container (`VSEG`) for image / label /
//!   weight volumes, plus PGM slice export for inspection.
//! - [`weights`] — per-pixel loss-weight maps from ground-truth labels:
//!   neighborhood label entropy, smoothed Euclidean distance transform, and
//!   fixed-ratio baselines.
//! - [`tensor`] — a minimal dense NCHW tensor engine with reverse-mode
//!   differentiation, SGD/Adam, and a finite-difference gradient checker.
//! - [`models`] — a 2D UNet and a patch discriminator assembled from the
//!   tensor ops, with `UNCK1` checkpointing and partial weight transfer.
//! - [`train`] — supervised multi-class training, binary fine-tuning with
//!   weight maps and photometric jitter, and an unsupervised adversarial
//!   adaptation loop that never reads target labels.
//! - [`metrics`] — per-class Jaccard, mean Jaccard, confusion matrices.
//! - [`synth`] — a deterministic synthetic cell-volume generator with a
//!   controllable photometric domain shift.
//! - [`cli`] — the `vseg` command-line binary exposing the pipeline.
//!
//! Every source of randomness derives from an explicit `u64` seed; two runs
//! with the same configuration produce bitwise identical checkpoints and
//! metric logs.
//!
//! See the `examples/` directory for one runnable program per capability:
//!
//! ```bash
//! cargo run --release --example make_synth
//! cargo run --release --example gen_weights
//! cargo run --release --example grad_check
//! cargo run --release --example train_supervised
//! cargo run --release --example finetune_binary
//! cargo run --release --example adapt_adversarial
//! cargo run --release --example evaluate
//! ```

pub mod cli;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod weights;

pub use metrics::{confusion, jaccard, mean_jaccard, ConfusionMatrix};
pub use models::{
    build_discriminator, build_unet, load_checkpoint, load_checkpoint_partial, save_checkpoint,
    DiscConfig, ModelParams, UNetConfig,
};
pub use synth::{generate, ClassMode, DomainStyle, SynthConfig};
pub use tensor::{OptKind, OptimizerState, Shape, Tensor};
pub use volume::{
    export_pgm, import_pgm, read_volume, write_volume, Dtype, Slice2D, Volume3D,
};
pub use weights::{
    binarize_labels, distance_transform, entropy_map, fixed_ratio_weights, gaussian_smooth,
    normalize_weights, BinaryMap2D, WeightMap2D,
};
