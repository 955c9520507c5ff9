//! Deterministic synthetic cell volumes.
//!
//! Each slice is a nearest-seed partition: pixels whose nearest and
//! second-nearest seed distances differ by less than the boundary thickness
//! become the thin boundary class, everything else belongs to the interior
//! region of its nearest seed. The result looks like a wall-and-cell mosaic
//! with a controllable class imbalance.
//!
//! The target domain style reuses the exact same geometry (labels are
//! identical for the same seed) but shifts the photometry: per-slice gain and
//! bias plus stronger noise, mimicking a stack whose intensity statistics
//! drift from slice to slice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::volume::{Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassMode {
    /// Boundary plus three interior classes; labels {0, 1, 2, 3} with
    /// boundary = 1 and interiors cycling over {0, 2, 3}.
    FourClass,
    /// Boundary (1) vs everything else (0).
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainStyle {
    /// Stable intensities across slices.
    Source,
    /// Per-slice gain/bias and stronger noise; same geometry rules.
    Target,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// (z, y, x)
    pub dims: (usize, usize, usize),
    /// Seed points per slice; at least 2.
    pub points: usize,
    /// Boundary band thickness in pixels.
    pub thickness: f32,
    pub mode: ClassMode,
    pub style: DomainStyle,
    /// Standard deviation of the additive intensity noise.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: (8, 64, 64),
            points: 8,
            thickness: 2.0,
            mode: ClassMode::FourClass,
            style: DomainStyle::Source,
            noise_sigma: 0.02,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let (z, y, x) = self.dims;
        if z == 0 || y == 0 || x == 0 {
            return Err(SynthError::BadConfig("dims must be positive".into()));
        }
        if self.points < 2 {
            return Err(SynthError::BadConfig("need at least 2 seed points".into()));
        }
        if self.points > y * x {
            return Err(SynthError::BadConfig(
                "more seed points than pixels".into(),
            ));
        }
        if !(self.thickness >= 1.0) {
            return Err(SynthError::BadConfig("thickness must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SynthError::BadConfig("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn class_count(&self) -> u8 {
        match self.mode {
            ClassMode::FourClass => 4,
            ClassMode::Binary => 2,
        }
    }
}

const PHOTO_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn base_intensity(mode: ClassMode, label: u8) -> f32 {
    match (mode, label) {
        (_, 1) => 0.2, // boundary walls are dark
        (ClassMode::Binary, _) => 0.7,
        (ClassMode::FourClass, 0) => 0.5,
        (ClassMode::FourClass, 2) => 0.7,
        (ClassMode::FourClass, _) => 0.9,
    }
}

/// Generates a paired (image, labels) volume, slice by slice.
///
/// Geometry and photometry consume independent per-slice RNG streams, so
/// source-style and target-style volumes built from the same seed share
/// identical label volumes.
pub fn generate(cfg: &SynthConfig) -> Result<(Volume3D, Volume3D), SynthError> {
    cfg.validate()?;
    let (z, y, x) = cfg.dims;
    let mut labels = vec![0u8; z * y * x];
    let mut image = vec![0f32; z * y * x];

    for slice in 0..z {
        let mut geom_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ slice as u64);
        let mut photo_rng =
            ChaCha8Rng::seed_from_u64((cfg.seed ^ slice as u64).wrapping_add(PHOTO_STREAM));

        // Distinct seed points.
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(cfg.points);
        while points.len() < cfg.points {
            let py = geom_rng.gen_range(0..y);
            let px = geom_rng.gen_range(0..x);
            let p = (py as f64, px as f64);
            if !points.contains(&p) {
                points.push(p);
            }
        }

        let plane = &mut labels[slice * y * x..(slice + 1) * y * x];
        for py in 0..y {
            for px in 0..x {
                let mut d1 = f64::INFINITY;
                let mut d2 = f64::INFINITY;
                let mut nearest = 0usize;
                let mut second = 0usize;
                for (i, &(sy, sx)) in points.iter().enumerate() {
                    let dy = sy - py as f64;
                    let dx = sx - px as f64;
                    let d = (dy * dy + dx * dx).sqrt();
                    if d < d1 {
                        d2 = d1;
                        second = nearest;
                        d1 = d;
                        nearest = i;
                    } else if d < d2 {
                        d2 = d;
                        second = i;
                    }
                }
                // Perpendicular distance to the bisector of the two nearest
                // seeds: (d2^2 - d1^2) / (2 |a - b|). Marking pixels within
                // thickness/2 yields a band of true width `thickness`
                // regardless of the wall's orientation.
                let (ay, ax) = points[nearest];
                let (by, bx) = points[second];
                let seed_gap = ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt();
                let to_wall = (d2 * d2 - d1 * d1) / (2.0 * seed_gap);
                let label = if to_wall < f64::from(cfg.thickness) / 2.0 {
                    1
                } else {
                    match cfg.mode {
                        ClassMode::Binary => 0,
                        ClassMode::FourClass => [0u8, 2, 3][nearest % 3],
                    }
                };
                plane[py * x + px] = label;
            }
        }

        // Photometry on top of the finished label plane.
        let (gain, bias, noise) = match cfg.style {
            DomainStyle::Source => (1.0f32, 0.0f32, cfg.noise_sigma),
            DomainStyle::Target => (
                photo_rng.gen_range(0.75..1.25),
                photo_rng.gen_range(-0.12..0.12),
                cfg.noise_sigma * 1.8,
            ),
        };
        let img_plane = &mut image[slice * y * x..(slice + 1) * y * x];
        for (out, &label) in img_plane.iter_mut().zip(plane.iter()) {
            let clean = base_intensity(cfg.mode, label);
            let n: f32 = if noise > 0.0 {
                photo_rng.sample::<f32, _>(rand_distr::StandardNormal) * noise
            } else {
                0.0
            };
            *out = (gain * clean + bias + n).clamp(0.0, 1.0);
        }
    }

    let image = Volume3D::scalars((z, y, x), image)?;
    let labels = Volume3D::labels((z, y, x), cfg.class_count(), labels)?;
    Ok((image, labels))
}
