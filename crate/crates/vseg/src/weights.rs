//! Per-pixel loss-weight maps derived from ground-truth label slices.
//!
//! Two schemes counteract the thin-boundary class imbalance: the entropy of
//! the label histogram in a k x k neighborhood of each pixel, and the exact
//! Euclidean distance transform of the boundary mask smoothed with a wide
//! Gaussian. Fixed-ratio maps serve as baselines. All maps pass through
//! [`normalize_weights`] (floor, then rescale to mean 1) before entering the
//! loss, so the learning rate is independent of the scheme.

use thiserror::Error;

use crate::volume::Slice2D;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("slice has no pixels")]
    EmptySlice,
    #[error("expected a label slice")]
    NotALabelSlice,
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f32),
    #[error("ratio must be positive, got {0}")]
    NonPositiveRatio(f32),
    #[error("invalid weight map: {0}")]
    InvalidWeights(String),
}

/// Per-pixel non-negative loss weights for one slice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap2D {
    dims: (usize, usize),
    data: Vec<f32>,
}

impl WeightMap2D {
    pub fn new(dims: (usize, usize), data: Vec<f32>) -> Result<Self, WeightError> {
        if data.len() != dims.0 * dims.1 {
            return Err(WeightError::InvalidWeights(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(WeightError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self { dims, data })
    }

    /// Dims as (y, x).
    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Boundary mask for one slice; 1 marks boundary pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMap2D {
    dims: (usize, usize),
    data: Vec<u8>,
}

impl BinaryMap2D {
    pub fn new(dims: (usize, usize), data: Vec<u8>) -> Result<Self, WeightError> {
        if data.len() != dims.0 * dims.1 {
            return Err(WeightError::InvalidWeights(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(WeightError::InvalidWeights(
                "binary map values must be 0 or 1".into(),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

#[inline]
fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Entropy of the label histogram in a `window x window` neighborhood of
/// each pixel (clamp-to-edge at borders), in bits.
///
/// Uniform neighborhoods score 0; pixels near class transitions score up to
/// log2(C). Runs a sliding histogram per row, one column in and one out per
/// step.
pub fn entropy_map(labels: &Slice2D, window: usize) -> Result<WeightMap2D, WeightError> {
    if window % 2 == 0 {
        return Err(WeightError::EvenWindow(window));
    }
    let data = labels.as_labels().ok_or(WeightError::NotALabelSlice)?;
    let (h, w) = labels.dims();
    if h == 0 || w == 0 || data.is_empty() {
        return Err(WeightError::EmptySlice);
    }
    let bins = if labels.class_count() > 0 {
        labels.class_count() as usize
    } else {
        256
    };
    let r = (window / 2) as isize;
    let total = (window * window) as f64;
    let mut out = vec![0f32; h * w];
    let mut hist = vec![0u32; bins];

    for y in 0..h {
        let rows: Vec<usize> = (-r..=r).map(|dy| clamp_idx(y as isize + dy, h)).collect();
        hist.iter_mut().for_each(|c| *c = 0);
        for &ry in &rows {
            for dx in -r..=r {
                hist[data[ry * w + clamp_idx(dx, w)] as usize] += 1;
            }
        }
        for x in 0..w {
            let mut entropy = 0f64;
            for &cnt in hist.iter() {
                if cnt > 0 {
                    let f = cnt as f64 / total;
                    entropy -= f * f.log2();
                }
            }
            out[y * w + x] = entropy as f32;
            if x + 1 < w {
                let out_col = clamp_idx(x as isize - r, w);
                let in_col = clamp_idx(x as isize + 1 + r, w);
                for &ry in &rows {
                    hist[data[ry * w + out_col] as usize] -= 1;
                    hist[data[ry * w + in_col] as usize] += 1;
                }
            }
        }
    }
    WeightMap2D::new((h, w), out)
}

/// Boundary mask: 1 where the label equals `boundary_class`, 0 elsewhere.
pub fn binarize_labels(labels: &Slice2D, boundary_class: u8) -> Result<BinaryMap2D, WeightError> {
    let data = labels.as_labels().ok_or(WeightError::NotALabelSlice)?;
    let out = data
        .iter()
        .map(|&v| u8::from(v == boundary_class))
        .collect();
    BinaryMap2D::new(labels.dims(), out)
}

/// Exact squared Euclidean distance to the nearest background (0) pixel.
///
/// Two-pass lower-envelope-of-parabolas transform; squared distances are
/// integers and exact, so results can be compared bitwise against a brute
/// force scan. Pixels of an all-foreground map come back as infinity.
pub fn distance_transform_sq(b: &BinaryMap2D) -> Vec<f64> {
    let (h, w) = b.dims;
    let mut grid: Vec<f64> = b
        .data
        .iter()
        .map(|&v| if v == 0 { 0.0 } else { f64::INFINITY })
        .collect();

    let side = h.max(w);
    let mut scratch_f = vec![0f64; side];
    let mut scratch_out = vec![0f64; side];
    let mut hull_pos = vec![0usize; side];
    let mut hull_bound = vec![0f64; side + 1];

    // Columns, then rows.
    for x in 0..w {
        for y in 0..h {
            scratch_f[y] = grid[y * w + x];
        }
        dt_1d(
            &scratch_f[..h],
            &mut scratch_out[..h],
            &mut hull_pos,
            &mut hull_bound,
        );
        for y in 0..h {
            grid[y * w + x] = scratch_out[y];
        }
    }
    for y in 0..h {
        scratch_f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt_1d(
            &scratch_f[..w],
            &mut scratch_out[..w],
            &mut hull_pos,
            &mut hull_bound,
        );
        grid[y * w..(y + 1) * w].copy_from_slice(&scratch_out[..w]);
    }
    grid
}

/// 1D squared distance transform of a sampled function via the lower
/// envelope of the parabolas `f(p) + (q - p)^2`.
fn dt_1d(f: &[f64], out: &mut [f64], hull_pos: &mut [usize], hull_bound: &mut [f64]) {
    let n = f.len();
    debug_assert!(n > 0);
    let intersect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64
    };

    let mut k = 0usize;
    hull_pos[0] = 0;
    hull_bound[0] = f64::NEG_INFINITY;
    hull_bound[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[hull_pos[k]] == f64::INFINITY {
            // Only possible while the hull still holds the initial parabola.
            hull_pos[k] = q;
            hull_bound[k] = f64::NEG_INFINITY;
            hull_bound[k + 1] = f64::INFINITY;
            continue;
        }
        let mut s = intersect(hull_pos[k], q);
        while s <= hull_bound[k] {
            k -= 1;
            s = intersect(hull_pos[k], q);
        }
        k += 1;
        hull_pos[k] = q;
        hull_bound[k] = s;
        hull_bound[k + 1] = f64::INFINITY;
    }

    let mut k = 0usize;
    for q in 0..n {
        while hull_bound[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - hull_pos[k] as f64;
        out[q] = d * d + f[hull_pos[k]];
    }
}

/// Euclidean distance from each pixel to the nearest background pixel.
///
/// Background pixels get 0; boundary (foreground) pixels get their depth
/// inside the boundary band. An all-foreground map falls back to the
/// diagonal length of the slice.
pub fn distance_transform(b: &BinaryMap2D) -> WeightMap2D {
    let (h, w) = b.dims;
    let diag = ((h * h + w * w) as f64).sqrt();
    let data = distance_transform_sq(b)
        .into_iter()
        .map(|d2| {
            if d2.is_finite() {
                d2.sqrt() as f32
            } else {
                diag as f32
            }
        })
        .collect();
    WeightMap2D::new((h, w), data).expect("distances are finite and non-negative")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    kernel
}

/// Separable Gaussian blur with clamp-to-edge padding.
///
/// Kernel radius is ceil(3 sigma) and the kernel is normalized to sum 1, so
/// constant maps are preserved and interior mass is conserved.
pub fn gaussian_smooth(w_map: &WeightMap2D, sigma: f32) -> Result<WeightMap2D, WeightError> {
    if !(sigma > 0.0) {
        return Err(WeightError::NonPositiveSigma(sigma));
    }
    let kernel = gaussian_kernel(sigma as f64);
    let r = kernel.len() / 2;
    let (h, w) = w_map.dims;

    let mut horiz = vec![0f64; h * w];
    for y in 0..h {
        let row = &w_map.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f64;
            for (i, &k) in kernel.iter().enumerate() {
                let sx = clamp_idx(x as isize + i as isize - r as isize, w);
                acc += k * row[sx] as f64;
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (i, &k) in kernel.iter().enumerate() {
                let sy = clamp_idx(y as isize + i as isize - r as isize, h);
                acc += k * horiz[sy * w + x];
            }
            out[y * w + x] = acc.max(0.0) as f32;
        }
    }
    WeightMap2D::new((h, w), out)
}

/// Two-level baseline: `ratio` on boundary pixels, 1 elsewhere.
pub fn fixed_ratio_weights(b: &BinaryMap2D, ratio: f32) -> Result<WeightMap2D, WeightError> {
    if !(ratio > 0.0) {
        return Err(WeightError::NonPositiveRatio(ratio));
    }
    let data = b
        .data
        .iter()
        .map(|&v| if v == 1 { ratio } else { 1.0 })
        .collect();
    WeightMap2D::new(b.dims, data)
}

/// Floors a weight map and rescales it to mean 1.
///
/// Solved as a fixed point of clamp-then-rescale so that both constraints
/// hold at once (min >= floor, mean = 1 within 1e-5); a single pass can leave
/// the smallest weights back under the floor after rescaling. An all-zero
/// map with a zero floor comes back as all ones.
pub fn normalize_weights(w_map: &WeightMap2D, floor: f32) -> WeightMap2D {
    let (h, w) = w_map.dims;
    let n = w_map.data.len() as f64;
    let floor = f64::from(floor.max(0.0));
    let mut cur: Vec<f64> = w_map.data.iter().map(|&v| f64::from(v)).collect();

    for _ in 0..100 {
        let mut delta = 0f64;
        let mut sum = 0f64;
        for v in cur.iter_mut() {
            if *v < floor {
                *v = floor;
            }
            sum += *v;
        }
        if sum == 0.0 {
            return WeightMap2D::new((h, w), vec![1.0; cur.len()])
                .expect("constant map is valid");
        }
        let scale = n / sum;
        for v in cur.iter_mut() {
            let next = *v * scale;
            delta = delta.max((next - *v).abs());
            *v = next;
        }
        if delta <= 1e-9 {
            break;
        }
    }
    let data = cur.into_iter().map(|v| v.max(floor) as f32).collect();
    WeightMap2D::new((h, w), data).expect("normalized weights are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Slice2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ---- independent oracles -------------------------------------------

    /// Per-pixel histogram entropy, recomputed from scratch for every pixel.
    pub(crate) fn brute_force_entropy(
        labels: &[u8],
        dims: (usize, usize),
        window: usize,
    ) -> Vec<f64> {
        let (h, w) = dims;
        let r = (window / 2) as isize;
        let total = (window * window) as f64;
        let mut out = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut counts = std::collections::HashMap::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = clamp_idx(y as isize + dy, h);
                        let sx = clamp_idx(x as isize + dx, w);
                        *counts.entry(labels[sy * w + sx]).or_insert(0u32) += 1;
                    }
                }
                let mut e = 0f64;
                for (_, cnt) in counts {
                    let f = cnt as f64 / total;
                    e -= f * f.log2();
                }
                out[y * w + x] = e;
            }
        }
        out
    }

    /// Squared distance to the nearest background pixel by exhaustive scan.
    pub(crate) fn brute_force_dt_sq(b: &BinaryMap2D) -> Vec<f64> {
        let (h, w) = b.dims();
        let mut out = vec![f64::INFINITY; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::INFINITY;
                for qy in 0..h {
                    for qx in 0..w {
                        if b.data()[qy * w + qx] == 0 {
                            let dy = qy as f64 - y as f64;
                            let dx = qx as f64 - x as f64;
                            best = best.min(dy * dy + dx * dx);
                        }
                    }
                }
                out[y * w + x] = best;
            }
        }
        out
    }

    /// Dense 2D convolution with the separable product kernel, clamp padding.
    fn dense_gauss_2d(w_map: &WeightMap2D, sigma: f64) -> Vec<f64> {
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let (h, w) = w_map.dims();
        let mut out = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let k = kernel[(dy + r) as usize] * kernel[(dx + r) as usize];
                        let sy = clamp_idx(y as isize + dy, h);
                        let sx = clamp_idx(x as isize + dx, w);
                        acc += k * w_map.data()[sy * w + sx] as f64;
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn label_slice(dims: (usize, usize), classes: u8, data: Vec<u8>) -> Slice2D {
        Slice2D::labels(dims, classes, data).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> Vec<u8> {
        (0..h * w).map(|_| rng.gen_range(0..classes)).collect()
    }

    // ---- entropy map ----------------------------------------------------

    #[test]
    fn constant_labels_have_zero_entropy() {
        let s = label_slice((6, 7), 4, vec![2; 42]);
        let m = entropy_map(&s, 5).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_entropy_of_13_12_split() {
        // 13 pixels of class 0 and 12 of class 1 in the 5x5 window.
        let mut data = vec![0u8; 25];
        for v in data.iter_mut().skip(13) {
            *v = 1;
        }
        let s = label_slice((5, 5), 2, data);
        let m = entropy_map(&s, 5).unwrap();
        let center = m.data()[2 * 5 + 2];
        // -(13/25) log2(13/25) - (12/25) log2(12/25)
        assert!((f64::from(center) - 0.9988455985).abs() < 1e-6);
    }

    #[test]
    fn window_one_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = label_slice((8, 9), 4, random_labels(&mut rng, 8, 9, 4));
        let m = entropy_map(&s, 1).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_window_is_rejected() {
        let s = label_slice((4, 4), 2, vec![0; 16]);
        assert!(matches!(entropy_map(&s, 4), Err(WeightError::EvenWindow(4))));
    }

    #[test]
    fn entropy_matches_brute_force_and_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let h = rng.gen_range(1..20);
            let w = rng.gen_range(1..20);
            let classes = 4u8;
            let data = random_labels(&mut rng, h, w, classes);
            let s = label_slice((h, w), classes, data.clone());
            let window = *[1usize, 3, 5, 7].iter().nth(rng.gen_range(0..4)).unwrap();
            let m = entropy_map(&s, window).unwrap();
            let oracle = brute_force_entropy(&data, (h, w), window);
            let bound = f64::from(classes).log2() + 1e-6;
            for (got, want) in m.data().iter().zip(oracle) {
                assert!((f64::from(*got) - want).abs() < 1e-6);
                assert!(f64::from(*got) <= bound);
            }
        }
    }

    // ---- binarize -------------------------------------------------------

    #[test]
    fn binarize_marks_only_the_boundary_class() {
        let s = label_slice((1, 4), 5, vec![1, 2, 3, 4]);
        let b = binarize_labels(&s, 1).unwrap();
        assert_eq!(b.data(), &[1, 0, 0, 0]);
    }

    #[test]
    fn binarize_all_boundary_and_absent_class() {
        let all = label_slice((2, 2), 2, vec![1; 4]);
        assert_eq!(binarize_labels(&all, 1).unwrap().data(), &[1, 1, 1, 1]);

        let none = label_slice((2, 2), 4, vec![0, 2, 3, 0]);
        assert_eq!(binarize_labels(&none, 1).unwrap().data(), &[0, 0, 0, 0]);
    }

    // ---- distance transform ----------------------------------------------

    #[test]
    fn all_background_distance_is_zero() {
        let b = BinaryMap2D::new((3, 4), vec![0; 12]).unwrap();
        assert!(distance_transform(&b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_center_foreground_pixel() {
        let mut data = vec![0u8; 9];
        data[4] = 1;
        let b = BinaryMap2D::new((3, 3), data).unwrap();
        let d = distance_transform(&b);
        for (i, &v) in d.data().iter().enumerate() {
            if i == 4 {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn row_band_distances() {
        let b = BinaryMap2D::new((1, 5), vec![0, 1, 1, 1, 0]).unwrap();
        let sq = distance_transform_sq(&b);
        assert_eq!(sq, vec![0.0, 1.0, 4.0, 1.0, 0.0]);
        assert_eq!(distance_transform(&b).data(), &[0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn all_foreground_falls_back_to_diagonal() {
        let b = BinaryMap2D::new((3, 4), vec![1; 12]).unwrap();
        let d = distance_transform(&b);
        let diag = 25f32.sqrt();
        assert!(d.data().iter().all(|&v| v == diag));
    }

    #[test]
    fn distance_transform_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let h = rng.gen_range(1..33);
            let w = rng.gen_range(1..33);
            let density = rng.gen_range(0.05..0.95);
            let data: Vec<u8> = (0..h * w)
                .map(|_| u8::from(rng.gen_bool(density)))
                .collect();
            let b = BinaryMap2D::new((h, w), data).unwrap();
            assert_eq!(distance_transform_sq(&b), brute_force_dt_sq(&b));
        }
    }

    // ---- gaussian smoothing ----------------------------------------------

    #[test]
    fn constant_map_is_preserved() {
        let w = WeightMap2D::new((9, 11), vec![0.37; 99]).unwrap();
        let s = gaussian_smooth(&w, 2.0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn impulse_response_matches_analytic_kernel() {
        let (h, w) = (15, 15);
        let mut data = vec![0f32; h * w];
        data[7 * w + 7] = 1.0;
        let m = WeightMap2D::new((h, w), data).unwrap();
        let s = gaussian_smooth(&m, 1.0).unwrap();
        let k = gaussian_kernel(1.0);
        let r = k.len() / 2;
        let center = f64::from(s.data()[7 * w + 7]);
        assert!((center - k[r] * k[r]).abs() < 1e-6);
        let neighbor = f64::from(s.data()[7 * w + 8]);
        assert!((neighbor - k[r] * k[r + 1]).abs() < 1e-6);
    }

    #[test]
    fn sigma_ten_preserves_interior_mass() {
        let (h, w) = (64, 64);
        let mut data = vec![0f32; h * w];
        data[32 * w + 32] = 1.0;
        let m = WeightMap2D::new((h, w), data).unwrap();
        let s = gaussian_smooth(&m, 10.0).unwrap();
        let mass: f64 = s.data().iter().map(|&v| f64::from(v)).sum();
        assert!((mass - 1.0).abs() < 1e-4);
    }

    #[test]
    fn smoothing_matches_dense_2d_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (12, 10);
        let data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..3.0)).collect();
        let m = WeightMap2D::new((h, w), data).unwrap();
        let s = gaussian_smooth(&m, 1.5).unwrap();
        let oracle = dense_gauss_2d(&m, 1.5);
        for (got, want) in s.data().iter().zip(oracle) {
            assert!((f64::from(*got) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let m = WeightMap2D::new((2, 2), vec![1.0; 4]).unwrap();
        assert!(matches!(
            gaussian_smooth(&m, 0.0),
            Err(WeightError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn smoothing_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (10, 8);
        let d1: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..2.0)).collect();
        let d2: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..2.0)).collect();
        let a = 1.7f32;
        let m1 = WeightMap2D::new((h, w), d1.clone()).unwrap();
        let m2 = WeightMap2D::new((h, w), d2.clone()).unwrap();
        let combo = WeightMap2D::new(
            (h, w),
            d1.iter().zip(&d2).map(|(x, y)| a * x + y).collect(),
        )
        .unwrap();
        let s1 = gaussian_smooth(&m1, 2.0).unwrap();
        let s2 = gaussian_smooth(&m2, 2.0).unwrap();
        let sc = gaussian_smooth(&combo, 2.0).unwrap();
        for ((x, y), z) in s1.data().iter().zip(s2.data()).zip(sc.data()) {
            assert!((a * x + y - z).abs() < 1e-5);
        }
    }

    // ---- fixed ratio ------------------------------------------------------

    #[test]
    fn fixed_ratio_examples() {
        let b = BinaryMap2D::new((1, 2), vec![1, 0]).unwrap();
        assert_eq!(fixed_ratio_weights(&b, 10.0).unwrap().data(), &[10.0, 1.0]);
        assert_eq!(fixed_ratio_weights(&b, 1.0).unwrap().data(), &[1.0, 1.0]);

        let bg = BinaryMap2D::new((1, 3), vec![0, 0, 0]).unwrap();
        assert_eq!(
            fixed_ratio_weights(&bg, 5.0).unwrap().data(),
            &[1.0, 1.0, 1.0]
        );
        assert!(matches!(
            fixed_ratio_weights(&b, 0.0),
            Err(WeightError::NonPositiveRatio(_))
        ));
    }

    // ---- normalization ----------------------------------------------------

    fn mean(data: &[f32]) -> f64 {
        data.iter().map(|&v| f64::from(v)).sum::<f64>() / data.len() as f64
    }

    #[test]
    fn all_zero_normalizes_to_all_ones() {
        let m = WeightMap2D::new((2, 3), vec![0.0; 6]).unwrap();
        let n = normalize_weights(&m, 0.05);
        assert!(n.data().iter().all(|&v| v == 1.0));
        let nz = normalize_weights(&m, 0.0);
        assert!(nz.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn floor_and_mean_hold_simultaneously() {
        let m = WeightMap2D::new((1, 2), vec![0.0, 2.0]).unwrap();
        let n = normalize_weights(&m, 0.05);
        // Fixed point of clamp+rescale: small weight pinned at the floor,
        // the rest carries the remaining mass (sum = 2 => large = 1.95).
        assert!((n.data()[0] - 0.05).abs() < 1e-6);
        assert!((n.data()[1] - 1.95).abs() < 1e-5);
        assert!((mean(n.data()) - 1.0).abs() < 1e-5);
        assert!(n.data().iter().all(|&v| v >= 0.05));
    }

    #[test]
    fn already_normalized_map_is_unchanged() {
        let m = WeightMap2D::new((1, 4), vec![0.5, 1.5, 0.8, 1.2]).unwrap();
        let n = normalize_weights(&m, 0.05);
        for (a, b) in n.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn prop_normalize_is_idempotent(values in proptest::collection::vec(0f32..5.0, 1..64)) {
            let n = values.len();
            let m = WeightMap2D::new((1, n), values).unwrap();
            let once = normalize_weights(&m, 0.05);
            let twice = normalize_weights(&once, 0.05);
            prop_assert!((mean(once.data()) - 1.0).abs() < 1e-5);
            prop_assert!(once.data().iter().all(|&v| v >= 0.05));
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }

    // ---- pipeline mass property -------------------------------------------

    #[test]
    fn boundary_weights_dominate_far_pixels_after_pipeline() {
        // Sparse vertical boundary line at x = 5 on a 64x64 slice.
        let (h, w) = (64, 64);
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            labels[y * w + 5] = 1;
        }
        let s = label_slice((h, w), 2, labels.clone());
        let b = binarize_labels(&s, 1).unwrap();
        let sigma = 2.0f32;
        let n = normalize_weights(&gaussian_smooth(&distance_transform(&b), sigma).unwrap(), 0.05);

        let mut boundary_sum = 0f64;
        let mut boundary_n = 0usize;
        let mut far_sum = 0f64;
        let mut far_n = 0usize;
        let far = (3.0 * sigma).ceil() as usize;
        for y in 0..h {
            for x in 0..w {
                let v = f64::from(n.data()[y * w + x]);
                if labels[y * w + x] == 1 {
                    boundary_sum += v;
                    boundary_n += 1;
                } else if x.abs_diff(5) > far {
                    far_sum += v;
                    far_n += 1;
                }
            }
        }
        assert!(boundary_sum / boundary_n as f64 > far_sum / far_n as f64);
    }
}
