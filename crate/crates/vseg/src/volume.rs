//! Volumetric image I/O.
//!
//! Volumes are stored in the `VSEG` container, a fixed little-endian layout
//! chosen so that round-trips are bitwise lossless and file sizes are exactly
//! predictable:
//!
//! ```text
//! bytes 0..6   magic "VSEG1\n"
//! byte  6      dtype code (0 = u8 labels, 1 = f32 scalars)
//! byte  7      class count C (0 when scalars, or when labels are unconstrained)
//! bytes 8..20  dims z, y, x as u32
//! bytes 20..   payload, row-major with x fastest (u8 or f32 per element)
//! ```
//!
//! Single slices can be exported as binary PGM (`P5`, maxval 255) for visual
//! inspection and re-imported as label slices.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Magic prefix of every VSEG file.
pub const VSEG_MAGIC: &[u8; 6] = b"VSEG1\n";

const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic bytes, not a VSEG file")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("unknown dtype code {0}")]
    BadDtypeCode(u8),
    #[error("label value {value} out of range for class count {classes}")]
    LabelOutOfRange { value: u8, classes: u8 },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("slice index {z} out of range for depth {depth}")]
    IndexOutOfRange { z: usize, depth: usize },
    #[error("bad PGM header: {0}")]
    BadPgmHeader(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Element type of a volume or slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    /// Class labels in `0..C` for a declared class count `C`
    /// (`C == 0` leaves the full u8 range unconstrained).
    U8Label,
    /// Finite f32 scalars (image intensities, loss weights).
    F32Scalar,
}

#[derive(Debug, Clone, PartialEq)]
enum Buf {
    Labels(Vec<u8>),
    Scalars(Vec<f32>),
}

/// A dense z-y-x grid, row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: (usize, usize, usize),
    class_count: u8,
    buf: Buf,
}

/// One z-plane of a volume; an independent copy, mutating it never touches
/// the volume it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    dims: (usize, usize),
    class_count: u8,
    buf: Buf,
}

fn check_dims(dims: &[usize]) -> Result<usize, VolumeError> {
    let mut len = 1usize;
    for &d in dims {
        if d == 0 {
            return Err(VolumeError::InvariantViolation(
                "dims must be positive".into(),
            ));
        }
        len = len.checked_mul(d).ok_or_else(|| {
            VolumeError::InvariantViolation("dims overflow".into())
        })?;
    }
    Ok(len)
}

fn check_labels(data: &[u8], class_count: u8) -> Result<(), VolumeError> {
    if class_count == 0 {
        return Ok(());
    }
    for &v in data {
        if v >= class_count {
            return Err(VolumeError::LabelOutOfRange {
                value: v,
                classes: class_count,
            });
        }
    }
    Ok(())
}

fn check_scalars(data: &[f32]) -> Result<(), VolumeError> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(VolumeError::InvariantViolation(
            "scalar volume contains a non-finite value".into(),
        ));
    }
    Ok(())
}

impl Volume3D {
    /// Label volume with values in `0..class_count` (0 = unconstrained).
    pub fn labels(
        dims: (usize, usize, usize),
        class_count: u8,
        data: Vec<u8>,
    ) -> Result<Self, VolumeError> {
        let len = check_dims(&[dims.0, dims.1, dims.2])?;
        if data.len() != len {
            return Err(VolumeError::InvariantViolation(format!(
                "payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        check_labels(&data, class_count)?;
        Ok(Self {
            dims,
            class_count,
            buf: Buf::Labels(data),
        })
    }

    /// Scalar volume; every value must be finite.
    pub fn scalars(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self, VolumeError> {
        let len = check_dims(&[dims.0, dims.1, dims.2])?;
        if data.len() != len {
            return Err(VolumeError::InvariantViolation(format!(
                "payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        check_scalars(&data)?;
        Ok(Self {
            dims,
            class_count: 0,
            buf: Buf::Scalars(data),
        })
    }

    /// Dims as (z, y, x).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn dtype(&self) -> Dtype {
        match self.buf {
            Buf::Labels(_) => Dtype::U8Label,
            Buf::Scalars(_) => Dtype::F32Scalar,
        }
    }

    pub fn class_count(&self) -> u8 {
        self.class_count
    }

    pub fn as_labels(&self) -> Option<&[u8]> {
        match &self.buf {
            Buf::Labels(d) => Some(d),
            Buf::Scalars(_) => None,
        }
    }

    pub fn as_scalars(&self) -> Option<&[f32]> {
        match &self.buf {
            Buf::Scalars(d) => Some(d),
            Buf::Labels(_) => None,
        }
    }

    fn validate(&self) -> Result<(), VolumeError> {
        let len = check_dims(&[self.dims.0, self.dims.1, self.dims.2])?;
        match &self.buf {
            Buf::Labels(d) => {
                if d.len() != len {
                    return Err(VolumeError::InvariantViolation("payload length".into()));
                }
                check_labels(d, self.class_count)
            }
            Buf::Scalars(d) => {
                if d.len() != len {
                    return Err(VolumeError::InvariantViolation("payload length".into()));
                }
                check_scalars(d)
            }
        }
    }
}

impl Slice2D {
    pub fn labels(dims: (usize, usize), class_count: u8, data: Vec<u8>) -> Result<Self, VolumeError> {
        let len = check_dims(&[dims.0, dims.1])?;
        if data.len() != len {
            return Err(VolumeError::InvariantViolation(format!(
                "slice payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        check_labels(&data, class_count)?;
        Ok(Self {
            dims,
            class_count,
            buf: Buf::Labels(data),
        })
    }

    pub fn scalars(dims: (usize, usize), data: Vec<f32>) -> Result<Self, VolumeError> {
        let len = check_dims(&[dims.0, dims.1])?;
        if data.len() != len {
            return Err(VolumeError::InvariantViolation(format!(
                "slice payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        check_scalars(&data)?;
        Ok(Self {
            dims,
            class_count: 0,
            buf: Buf::Scalars(data),
        })
    }

    /// Dims as (y, x).
    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn dtype(&self) -> Dtype {
        match self.buf {
            Buf::Labels(_) => Dtype::U8Label,
            Buf::Scalars(_) => Dtype::F32Scalar,
        }
    }

    pub fn class_count(&self) -> u8 {
        self.class_count
    }

    pub fn as_labels(&self) -> Option<&[u8]> {
        match &self.buf {
            Buf::Labels(d) => Some(d),
            Buf::Scalars(_) => None,
        }
    }

    pub fn as_scalars(&self) -> Option<&[f32]> {
        match &self.buf {
            Buf::Scalars(d) => Some(d),
            Buf::Labels(_) => None,
        }
    }
}

/// Copy of plane `z` of `v`.
pub fn get_slice(v: &Volume3D, z: usize) -> Result<Slice2D, VolumeError> {
    let (zd, yd, xd) = v.dims;
    if z >= zd {
        return Err(VolumeError::IndexOutOfRange { z, depth: zd });
    }
    let plane = yd * xd;
    let buf = match &v.buf {
        Buf::Labels(d) => Buf::Labels(d[z * plane..(z + 1) * plane].to_vec()),
        Buf::Scalars(d) => Buf::Scalars(d[z * plane..(z + 1) * plane].to_vec()),
    };
    Ok(Slice2D {
        dims: (yd, xd),
        class_count: v.class_count,
        buf,
    })
}

/// Serializes a volume to the VSEG container; identical inputs yield
/// identical byte streams.
pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    v.validate()?;
    fs::write(path, encode_volume(v))?;
    Ok(())
}

fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let (z, y, x) = v.dims;
    let payload_len = match &v.buf {
        Buf::Labels(d) => d.len(),
        Buf::Scalars(d) => d.len() * 4,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(VSEG_MAGIC);
    out.push(match v.buf {
        Buf::Labels(_) => 0,
        Buf::Scalars(_) => 1,
    });
    out.push(v.class_count);
    out.extend_from_slice(&(z as u32).to_le_bytes());
    out.extend_from_slice(&(y as u32).to_le_bytes());
    out.extend_from_slice(&(x as u32).to_le_bytes());
    match &v.buf {
        Buf::Labels(d) => out.extend_from_slice(d),
        Buf::Scalars(d) => {
            for &s in d {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    out
}

/// Reads a VSEG container; inverse of [`write_volume`], bit-exact.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D, VolumeError> {
    let bytes = fs::read(path)?;
    decode_volume(&bytes)
}

fn decode_volume(bytes: &[u8]) -> Result<Volume3D, VolumeError> {
    if bytes.len() >= 6 && &bytes[..6] != VSEG_MAGIC {
        return Err(VolumeError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dtype_code = bytes[6];
    let class_count = bytes[7];
    let z = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let y = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let x = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let len = check_dims(&[z, y, x])?;
    let elem = match dtype_code {
        0 => 1,
        1 => 4,
        c => return Err(VolumeError::BadDtypeCode(c)),
    };
    let expected = HEADER_LEN + len * elem;
    if bytes.len() < expected {
        return Err(VolumeError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..expected];
    match dtype_code {
        0 => Volume3D::labels((z, y, x), class_count, payload.to_vec()),
        1 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Volume3D::scalars((z, y, x), data)
        }
        _ => unreachable!(),
    }
}

/// Writes a slice as binary PGM (`P5`, maxval 255).
///
/// Label slices are written verbatim; scalar slices are min-max rescaled to
/// 0..255, with constant slices mapping to all-zero pixels.
pub fn export_pgm(s: &Slice2D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let (y, x) = s.dims;
    let pixels: Vec<u8> = match &s.buf {
        Buf::Labels(d) => d.clone(),
        Buf::Scalars(d) => {
            let min = d.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = d.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if max > min {
                d.iter()
                    .map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8)
                    .collect()
            } else {
                vec![0u8; d.len()]
            }
        }
    };
    let mut out = format!("P5\n{} {}\n255\n", x, y).into_bytes();
    out.extend_from_slice(&pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM as an unconstrained label slice.
pub fn import_pgm(path: impl AsRef<Path>) -> Result<Slice2D, VolumeError> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String, VolumeError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(VolumeError::BadPgmHeader("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(VolumeError::BadPgmHeader("not a binary PGM (P5)".into()));
    }
    let x: usize = token()?
        .parse()
        .map_err(|_| VolumeError::BadPgmHeader("bad width".into()))?;
    let y: usize = token()?
        .parse()
        .map_err(|_| VolumeError::BadPgmHeader("bad height".into()))?;
    let maxval: usize = token()?
        .parse()
        .map_err(|_| VolumeError::BadPgmHeader("bad maxval".into()))?;
    if maxval != 255 {
        return Err(VolumeError::BadPgmHeader(format!(
            "unsupported maxval {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    let start = pos + 1;
    let expected = start + y * x;
    if bytes.len() < expected {
        return Err(VolumeError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    Slice2D::labels((y, x), 0, bytes[start..expected].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn tmp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (dir, path) = tmp("v.vseg");
        let v = Volume3D::labels((2, 3, 4), 5, (0..24).map(|i| (i % 5) as u8).collect()).unwrap();
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);

        let s = Volume3D::scalars((1, 2, 2), vec![0.0, -0.5, 1.25, 3.5e-12]).unwrap();
        write_volume(&s, &path).unwrap();
        let back = read_volume(&path).unwrap();
        for (a, b) in back
            .as_scalars()
            .unwrap()
            .iter()
            .zip(s.as_scalars().unwrap())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        drop(dir);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (dir, path) = tmp("x.vseg");
        let v = Volume3D::labels((1, 1, 1), 2, vec![1]).unwrap();
        let mut bytes = encode_volume(&v);
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::BadMagic)));
        drop(dir);
    }

    #[test]
    fn truncated_payload_is_detected() {
        // Header declares 2x2x2 u8 labels (8 payload bytes); provide 7.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(VSEG_MAGIC);
        bytes.push(0); // u8 labels
        bytes.push(4); // C = 4
        for d in [2u32, 2, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 7]);
        let (dir, path) = tmp("t.vseg");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(VolumeError::TruncatedFile {
                expected: 28,
                found: 27
            })
        ));
        drop(dir);
    }

    #[test]
    fn bad_dtype_code_is_detected() {
        let v = Volume3D::labels((1, 1, 1), 2, vec![1]).unwrap();
        let mut bytes = encode_volume(&v);
        bytes[6] = 9;
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::BadDtypeCode(9))
        ));
    }

    #[test]
    fn out_of_range_label_is_detected_on_read() {
        let v = Volume3D::labels((1, 1, 2), 0, vec![3, 7]).unwrap();
        let mut bytes = encode_volume(&v);
        bytes[7] = 4; // declare C = 4, payload contains 7
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::LabelOutOfRange {
                value: 7,
                classes: 4
            })
        ));
    }

    #[test]
    fn single_f32_file_is_24_bytes() {
        // 6 magic + 1 dtype + 1 class count + 12 dims + 4 payload.
        let v = Volume3D::scalars((1, 1, 1), vec![0.0]).unwrap();
        assert_eq!(encode_volume(&v).len(), 24);
    }

    #[test]
    fn writes_are_deterministic() {
        let v = Volume3D::scalars((2, 2, 2), (0..8).map(|i| i as f32 * 0.5).collect()).unwrap();
        assert_eq!(encode_volume(&v), encode_volume(&v));
    }

    #[test]
    fn nan_volume_is_rejected_before_write() {
        let mut v = Volume3D::scalars((1, 1, 1), vec![0.0]).unwrap();
        v.buf = Buf::Scalars(vec![f32::NAN]);
        let (dir, path) = tmp("nan.vseg");
        assert!(matches!(
            write_volume(&v, &path),
            Err(VolumeError::InvariantViolation(_))
        ));
        drop(dir);
    }

    #[test]
    fn get_slice_extracts_the_right_plane() {
        let v = Volume3D::labels((3, 2, 2), 0, (0..12).collect()).unwrap();
        let s = get_slice(&v, 1).unwrap();
        assert_eq!(s.as_labels().unwrap(), &[4, 5, 6, 7]);
        assert_eq!(s.dims(), (2, 2));

        assert!(matches!(
            get_slice(&v, 3),
            Err(VolumeError::IndexOutOfRange { z: 3, depth: 3 })
        ));

        let single = Volume3D::labels((1, 2, 2), 0, vec![9, 8, 7, 6]).unwrap();
        assert_eq!(get_slice(&single, 0).unwrap().as_labels().unwrap(), &[9, 8, 7, 6]);
    }

    #[test]
    fn pgm_u8_round_trip_preserves_values() {
        let (dir, path) = tmp("s.pgm");
        let s = Slice2D::labels((2, 2), 4, vec![0, 1, 2, 3]).unwrap();
        export_pgm(&s, &path).unwrap();
        let back = import_pgm(&path).unwrap();
        assert_eq!(back.as_labels().unwrap(), &[0, 1, 2, 3]);
        assert_eq!(back.dims(), (2, 2));
        drop(dir);
    }

    #[test]
    fn constant_f32_slice_exports_as_zeros() {
        let (dir, path) = tmp("c.pgm");
        let s = Slice2D::scalars((1, 3), vec![0.7, 0.7, 0.7]).unwrap();
        export_pgm(&s, &path).unwrap();
        assert_eq!(import_pgm(&path).unwrap().as_labels().unwrap(), &[0, 0, 0]);
        drop(dir);
    }

    #[test]
    fn f32_slice_rescales_min_max() {
        let (dir, path) = tmp("mm.pgm");
        let s = Slice2D::scalars((1, 2), vec![0.0, 1.0]).unwrap();
        export_pgm(&s, &path).unwrap();
        assert_eq!(import_pgm(&path).unwrap().as_labels().unwrap(), &[0, 255]);
        drop(dir);
    }

    proptest! {
        #[test]
        fn prop_label_round_trip(z in 1usize..4, y in 1usize..6, x in 1usize..6, seed in 0u8..64) {
            let data: Vec<u8> = (0..z*y*x).map(|i| ((i as u8).wrapping_mul(31).wrapping_add(seed)) % 6).collect();
            let v = Volume3D::labels((z, y, x), 6, data).unwrap();
            let bytes = encode_volume(&v);
            prop_assert_eq!(bytes.len(), HEADER_LEN + z*y*x);
            prop_assert_eq!(decode_volume(&bytes).unwrap(), v);
        }

        #[test]
        fn prop_scalar_round_trip(z in 1usize..3, y in 1usize..5, x in 1usize..5, scale in -4.0f32..4.0) {
            let data: Vec<f32> = (0..z*y*x).map(|i| scale * (i as f32 * 0.37 - 1.0)).collect();
            let v = Volume3D::scalars((z, y, x), data).unwrap();
            let bytes = encode_volume(&v);
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4*z*y*x);
            let back = decode_volume(&bytes).unwrap();
            for (a, b) in back.as_scalars().unwrap().iter().zip(v.as_scalars().unwrap()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn prop_get_slice_row_major(z in 1usize..4, y in 1usize..5, x in 1usize..5) {
            let data: Vec<u8> = (0..z*y*x).map(|i| (i % 251) as u8).collect();
            let v = Volume3D::labels((z, y, x), 0, data.clone()).unwrap();
            for zi in 0..z {
                let s = get_slice(&v, zi).unwrap();
                let sl = s.as_labels().unwrap();
                for yi in 0..y {
                    for xi in 0..x {
                        prop_assert_eq!(sl[yi * x + xi], data[zi * y * x + yi * x + xi]);
                    }
                }
            }
        }
    }
}
