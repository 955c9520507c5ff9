//! Network assembly and checkpointing.
//!
//! Both networks are built from the tensor ops: a 2D UNet (encoder/decoder
//! with skip connections, nearest-neighbor upsampling plus convolution on the
//! way up, 1x1 classifier head) and a small patch discriminator (four
//! stride-2 convolutions, global average pooling, one logit).
//!
//! Parameters live in an ordered, name-addressed [`ModelParams`] list. The
//! classifier head is always named `head.w` / `head.b`, which is what lets
//! [`load_checkpoint_partial`] transfer a 4-class backbone into a 2-class
//! network while reinitializing exactly the head.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Pad, Scalar, Shape, Tape, Tensor, TensorError, Var};

/// Magic prefix of every checkpoint file.
pub const UNCK_MAGIC: &[u8; 6] = b"UNCK1\n";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad magic bytes, not a UNCK checkpoint")]
    BadMagic,
    #[error("corrupt checkpoint entry: {0}")]
    CorruptEntry(String),
    #[error("discriminator input is not a probability map")]
    NotAProbabilityMap,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Encoder levels; spatial dims shrink by 2^(depth-1).
    pub depth: usize,
    /// Channels at the top level, doubling per level.
    pub base_channels: usize,
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            depth: 3,
            base_channels: 16,
            kernel: 3,
        }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 1 {
            return Err(ModelError::BadConfig("depth must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::BadConfig("need at least 2 classes".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(ModelError::BadConfig("channel counts must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::BadConfig("kernel must be odd".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial divisor the input dims must satisfy.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Recovers the architecture from a parameter list, for running
    /// inference straight from a checkpoint.
    pub fn from_params(params: &ModelParams) -> Result<Self, ModelError> {
        let first = params
            .get("enc0.conv1.w")
            .ok_or_else(|| ModelError::BadConfig("missing enc0.conv1.w".into()))?;
        let head = params
            .get("head.w")
            .ok_or_else(|| ModelError::BadConfig("missing head.w".into()))?;
        let mut depth = 0;
        while params.get(&format!("enc{depth}.conv1.w")).is_some() {
            depth += 1;
        }
        let cfg = Self {
            in_channels: first.shape.c,
            num_classes: head.shape.n,
            depth,
            base_channels: first.shape.n,
            kernel: first.shape.h,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    /// Channels of the incoming probability map (= class count).
    pub in_channels: usize,
    pub channels: [usize; 4],
    pub leaky_slope: f64,
}

impl DiscConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            channels: [16, 32, 64, 128],
            leaky_slope: 0.2,
        }
    }

    /// Smallest accepted input side.
    pub const MIN_SIDE: usize = 16;
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        tensor.requires_grad = true;
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect(),
        }
    }
}

/// Parameter leaves inserted on a tape, addressable by name.
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let order: Vec<(String, Var)> = pairs.into_iter().collect();
        let vars = order.iter().cloned().collect();
        Self { vars, order }
    }

    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Invalid(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Copies every parameter onto the tape as a gradient-bearing leaf.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> BoundParams {
    BoundParams::from_pairs(
        params
            .iter()
            .map(|(name, tensor)| (name.to_string(), tape.leaf(tensor))),
    )
}

/// Like [`bind_params`] but the leaves are frozen (no gradients collected).
pub fn bind_params_frozen<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> BoundParams {
    BoundParams::from_pairs(params.iter().map(|(name, tensor)| {
        let mut frozen = tensor.clone();
        frozen.requires_grad = false;
        frozen.grad = None;
        (name.to_string(), tape.leaf(&frozen))
    }))
}

/// Copies gradients computed by a backward pass back into the parameter
/// tensors, accumulating additively.
pub fn collect_grads<T: Scalar>(
    grads: &crate::tensor::Gradients<T>,
    bound: &BoundParams,
    params: &mut ModelParams<T>,
) {
    for (name, var) in bound.iter() {
        if let Some(g) = grads.get(var) {
            if let Some(p) = params.get_mut(name) {
                if p.requires_grad {
                    p.accumulate_grad(g);
                }
            }
        }
    }
}

fn he_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> (Tensor<T>, Tensor<T>) {
    let fan_in = in_c * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let data = (0..out_c * in_c * k * k)
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    let w = Tensor::from_vec(Shape::new(out_c, in_c, k, k), data).expect("shape");
    let b = Tensor::zeros(Shape::new(1, out_c, 1, 1));
    (w, b)
}

fn push_conv<T: Scalar>(
    params: &mut ModelParams<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) {
    let (w, b) = he_conv(rng, out_c, in_c, k);
    params.push(format!("{name}.w"), w);
    params.push(format!("{name}.b"), b);
}

/// He-normal initialized UNet parameters; deterministic for a given seed.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    let k = cfg.kernel;
    for i in 0..cfg.depth {
        let cin = if i == 0 {
            cfg.in_channels
        } else {
            cfg.channels(i - 1)
        };
        let ch = cfg.channels(i);
        push_conv(&mut params, &mut rng, &format!("enc{i}.conv1"), ch, cin, k);
        push_conv(&mut params, &mut rng, &format!("enc{i}.conv2"), ch, ch, k);
    }
    for i in (0..cfg.depth.saturating_sub(1)).rev() {
        let ch = cfg.channels(i);
        let below = cfg.channels(i + 1);
        push_conv(&mut params, &mut rng, &format!("dec{i}.up"), ch, below, k);
        push_conv(
            &mut params,
            &mut rng,
            &format!("dec{i}.conv1"),
            ch,
            2 * ch,
            k,
        );
        push_conv(&mut params, &mut rng, &format!("dec{i}.conv2"), ch, ch, k);
    }
    push_conv(&mut params, &mut rng, "head", cfg.num_classes, cfg.channels(0), 1);
    Ok(params)
}

fn conv_layer<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    pad: Pad,
) -> Result<Var, TensorError> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    tape.conv2d(x, w, b, stride, pad)
}

fn conv_relu<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    name: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let y = conv_layer(tape, bound, name, x, 1, Pad::Same)?;
    tape.relu(y)
}

/// Runs the UNet; `x` is (n, in_channels, h, w) with h, w divisible by
/// 2^(depth-1). Returns (n, num_classes, h, w) logits.
pub fn unet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &UNetConfig,
    x: Var,
) -> Result<Var, ModelError> {
    let xs = tape.shape(x);
    let div = cfg.spatial_divisor();
    if xs.c != cfg.in_channels || xs.h % div != 0 || xs.w % div != 0 || xs.h == 0 || xs.w == 0 {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "input {} incompatible with {} channels / divisor {}",
            xs, cfg.in_channels, div
        ))));
    }
    let mut skips = Vec::with_capacity(cfg.depth.saturating_sub(1));
    let mut cur = x;
    for i in 0..cfg.depth {
        cur = conv_relu(tape, bound, &format!("enc{i}.conv1"), cur)?;
        cur = conv_relu(tape, bound, &format!("enc{i}.conv2"), cur)?;
        if i + 1 < cfg.depth {
            skips.push(cur);
            cur = tape.maxpool2d(cur, 2, 2)?;
        }
    }
    for i in (0..cfg.depth.saturating_sub(1)).rev() {
        let up = tape.upsample_nn(cur, 2)?;
        let up = conv_layer(tape, bound, &format!("dec{i}.up"), up, 1, Pad::Same)?;
        let cat = tape.concat_channels(up, skips[i])?;
        cur = conv_relu(tape, bound, &format!("dec{i}.conv1"), cat)?;
        cur = conv_relu(tape, bound, &format!("dec{i}.conv2"), cur)?;
    }
    Ok(conv_layer(tape, bound, "head", cur, 1, Pad::Same)?)
}

/// He-normal initialized discriminator parameters.
pub fn build_discriminator(cfg: &DiscConfig, seed: u64) -> Result<ModelParams, ModelError> {
    if cfg.in_channels < 1 {
        return Err(ModelError::BadConfig("in_channels must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    let mut cin = cfg.in_channels;
    for (i, &ch) in cfg.channels.iter().enumerate() {
        push_conv(&mut params, &mut rng, &format!("d{i}.conv"), ch, cin, 3);
        cin = ch;
    }
    push_conv(&mut params, &mut rng, "head", 1, cin, 1);
    Ok(params)
}

/// Runs the discriminator on a probability map (channel sums 1 per pixel
/// within 1e-4). Returns one logit per sample, shape (n, 1, 1, 1).
pub fn disc_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &DiscConfig,
    prob_map: Var,
) -> Result<Var, ModelError> {
    let xs = tape.shape(prob_map);
    if xs.c != cfg.in_channels {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "probability map has {} channels, discriminator expects {}",
            xs.c, cfg.in_channels
        ))));
    }
    if xs.h < DiscConfig::MIN_SIDE || xs.w < DiscConfig::MIN_SIDE {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "input {} below the {} pixel minimum",
            xs,
            DiscConfig::MIN_SIDE
        ))));
    }
    let plane = xs.h * xs.w;
    let value = tape.value(prob_map);
    for s in 0..xs.n {
        for p in 0..plane {
            let sum: f64 = (0..xs.c)
                .map(|c| value[(s * xs.c + c) * plane + p].as_f64())
                .sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(ModelError::NotAProbabilityMap);
            }
        }
    }
    let mut cur = prob_map;
    for i in 0..cfg.channels.len() {
        cur = conv_layer(tape, bound, &format!("d{i}.conv"), cur, 2, Pad::Same)?;
        cur = tape.leaky_relu(cur, cfg.leaky_slope)?;
    }
    let pooled = tape.global_avg_pool(cur)?;
    Ok(conv_layer(tape, bound, "head", pooled, 1, Pad::Valid)?)
}

// ---- checkpoints ----------------------------------------------------------

fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(UNCK_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4u8);
        for d in [tensor.shape.n, tensor.shape.c, tensor.shape.h, tensor.shape.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serializes parameters to the UNCK1 container; bitwise round trip.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::CorruptEntry(format!(
                "unexpected end of file while reading {what}"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    if bytes.len() < UNCK_MAGIC.len() || &bytes[..UNCK_MAGIC.len()] != UNCK_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut cur = Cursor {
        bytes,
        pos: UNCK_MAGIC.len(),
    };
    let count = cur.u32("entry count")?;
    let mut params = ModelParams::new();
    for i in 0..count {
        let name_len = cur.u16(&format!("entry {i} name length"))? as usize;
        let name = String::from_utf8(cur.take(name_len, "entry name")?.to_vec())
            .map_err(|_| ModelError::CorruptEntry(format!("entry {i} name is not utf-8")))?;
        let rank = cur.take(1, "rank")?[0] as usize;
        if rank == 0 || rank > 4 {
            return Err(ModelError::CorruptEntry(format!(
                "entry '{name}' has unsupported rank {rank}"
            )));
        }
        let mut dims = [1usize; 4];
        for d in 0..rank {
            dims[4 - rank + d] = cur.u32(&format!("entry '{name}' dim {d}"))? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = cur.take(shape.len() * 4, &format!("entry '{name}' payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.get(&name).is_some() {
            return Err(ModelError::CorruptEntry(format!(
                "duplicate entry '{name}'"
            )));
        }
        params.push(
            name,
            Tensor::from_vec(shape, data).map_err(|e| ModelError::CorruptEntry(e.to_string()))?,
        );
    }
    Ok(params)
}

/// Reads a UNCK1 checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

/// Names moved (or not) by a partial checkpoint load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialLoadReport {
    /// Entries copied from the checkpoint (name and shape matched).
    pub transferred: Vec<String>,
    /// Entries left at their fresh initialization.
    pub reinitialized: Vec<String>,
}

/// Copies every checkpoint entry whose name and shape match into `target`;
/// everything else keeps its fresh initialization and is reported.
pub fn load_checkpoint_partial(
    target: &mut ModelParams,
    path: impl AsRef<Path>,
) -> Result<PartialLoadReport, ModelError> {
    let source = load_checkpoint(path)?;
    let mut report = PartialLoadReport {
        transferred: Vec::new(),
        reinitialized: Vec::new(),
    };
    for (name, tensor) in target.iter_mut() {
        match source.get(name) {
            Some(src) if src.shape == tensor.shape => {
                tensor.data.copy_from_slice(&src.data);
                report.transferred.push(name.to_string());
            }
            _ => report.reinitialized.push(name.to_string()),
        }
    }
    Ok(report)
}

// ---- gradient-check report --------------------------------------------------

/// Runs the finite-difference checker over every layer family plus the two
/// composed graphs (UNet + weighted cross-entropy, discriminator + BCE).
/// Returns (family, max relative error) pairs.
pub fn grad_check_report(seed: u64) -> Result<Vec<(String, f64)>, ModelError> {
    use crate::tensor::grad_check;
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report: Vec<(String, f64)> = Vec::new();

    let randn = |rng: &mut ChaCha8Rng, shape: Shape| -> Tensor<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_vec(shape, (0..shape.len()).map(|_| normal.sample(rng)).collect()).unwrap()
    };
    // Keeps piecewise-linear kinks away from the finite-difference step.
    let nudge = |t: &mut Tensor<f64>| {
        for v in t.data.iter_mut() {
            if v.abs() < 0.05 {
                *v = if *v < 0.0 { -0.05 } else { 0.05 };
            }
        }
    };
    let coeffs = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };

    let h = 1e-3;
    let coords = 50;

    // conv2d, stride 1, same padding
    {
        let x = randn(&mut rng, Shape::new(1, 2, 5, 5));
        let w = randn(&mut rng, Shape::new(3, 2, 3, 3));
        let b = randn(&mut rng, Shape::new(1, 3, 1, 1));
        let c = coeffs(&mut rng, 75);
        let err = grad_check(&[x, w, b], h, coords, seed, |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], vars[2], 1, Pad::Same)?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("conv2d_s1_same".into(), err));
    }
    // conv2d, stride 2
    {
        let x = randn(&mut rng, Shape::new(2, 2, 6, 6));
        let w = randn(&mut rng, Shape::new(3, 2, 3, 3));
        let b = randn(&mut rng, Shape::new(1, 3, 1, 1));
        let c = coeffs(&mut rng, 2 * 3 * 3 * 3);
        let err = grad_check(&[x, w, b], h, coords, seed ^ 1, |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], vars[2], 2, Pad::Same)?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("conv2d_s2_same".into(), err));
    }
    // conv2d, 1x1 valid (the classifier head shape)
    {
        let x = randn(&mut rng, Shape::new(1, 3, 4, 4));
        let w = randn(&mut rng, Shape::new(2, 3, 1, 1));
        let b = randn(&mut rng, Shape::new(1, 2, 1, 1));
        let c = coeffs(&mut rng, 32);
        let err = grad_check(&[x, w, b], h, coords, seed ^ 2, |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], vars[2], 1, Pad::Valid)?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("conv2d_1x1_valid".into(), err));
    }
    // maxpool2d
    {
        let x = randn(&mut rng, Shape::new(1, 2, 4, 4));
        let c = coeffs(&mut rng, 8);
        let err = grad_check(&[x], h, coords, seed ^ 3, |tape, vars| {
            let y = tape.maxpool2d(vars[0], 2, 2)?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("maxpool2d".into(), err));
    }
    // upsample_nn
    {
        let x = randn(&mut rng, Shape::new(1, 2, 3, 3));
        let c = coeffs(&mut rng, 72);
        let err = grad_check(&[x], h, coords, seed ^ 4, |tape, vars| {
            let y = tape.upsample_nn(vars[0], 2)?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("upsample_nn".into(), err));
    }
    // concat_channels
    {
        let a = randn(&mut rng, Shape::new(1, 2, 3, 3));
        let b = randn(&mut rng, Shape::new(1, 3, 3, 3));
        let c = coeffs(&mut rng, 45);
        let err = grad_check(&[a, b], h, coords, seed ^ 5, |tape, vars| {
            let y = tape.concat_channels(vars[0], vars[1])?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("concat_channels".into(), err));
    }
    // relu / leaky_relu / sigmoid
    {
        let mut x = randn(&mut rng, Shape::new(1, 2, 4, 4));
        nudge(&mut x);
        let c = coeffs(&mut rng, 32);
        let err = grad_check(&[x], h, coords, seed ^ 6, |tape, vars| {
            let y = tape.relu(vars[0])?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("relu".into(), err));
    }
    {
        let mut x = randn(&mut rng, Shape::new(1, 2, 4, 4));
        nudge(&mut x);
        let c = coeffs(&mut rng, 32);
        let err = grad_check(&[x], h, coords, seed ^ 7, |tape, vars| {
            let y = tape.leaky_relu(vars[0], 0.2)?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("leaky_relu".into(), err));
    }
    {
        let x = randn(&mut rng, Shape::new(1, 2, 4, 4));
        let c = coeffs(&mut rng, 32);
        let err = grad_check(&[x], h, coords, seed ^ 8, |tape, vars| {
            let y = tape.sigmoid(vars[0])?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("sigmoid".into(), err));
    }
    // softmax_channels
    {
        let x = randn(&mut rng, Shape::new(1, 4, 3, 3));
        let c = coeffs(&mut rng, 36);
        let err = grad_check(&[x], h, coords, seed ^ 9, |tape, vars| {
            let y = tape.softmax_channels(vars[0])?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("softmax_channels".into(), err));
    }
    // global_avg_pool
    {
        let x = randn(&mut rng, Shape::new(2, 3, 4, 4));
        let c = coeffs(&mut rng, 6);
        let err = grad_check(&[x], h, coords, seed ^ 10, |tape, vars| {
            let y = tape.global_avg_pool(vars[0])?;
            tape.weighted_sum(y, &c)
        })?;
        report.push(("global_avg_pool".into(), err));
    }
    // weighted cross-entropy
    {
        let x = randn(&mut rng, Shape::new(1, 3, 4, 4));
        let targets: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
        let weights: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..2.0)).collect();
        let err = grad_check(&[x], h, coords, seed ^ 11, |tape, vars| {
            tape.weighted_cross_entropy(vars[0], &targets, &weights)
        })?;
        report.push(("weighted_cross_entropy".into(), err));
    }
    // bce with logits
    {
        let x = randn(&mut rng, Shape::new(3, 1, 1, 1));
        let err = grad_check(&[x], h, coords, seed ^ 12, |tape, vars| {
            tape.bce_with_logits(vars[0], 1.0)
        })?;
        report.push(("bce_with_logits".into(), err));
    }
    // composed: 2-level UNet + weighted cross-entropy on a 16x16 input
    {
        let cfg = UNetConfig {
            in_channels: 1,
            num_classes: 2,
            depth: 2,
            base_channels: 8,
            kernel: 3,
        };
        let unet = build_unet(&cfg, seed)?.cast::<f64>();
        let names: Vec<String> = unet.names();
        let mut tensors: Vec<Tensor<f64>> = unet.iter().map(|(_, t)| t.clone()).collect();
        tensors.push(randn(&mut rng, Shape::new(1, 1, 16, 16)));
        let targets: Vec<u8> = (0..256).map(|_| rng.gen_range(0..2)).collect();
        let weights: Vec<f64> = (0..256).map(|_| rng.gen_range(0.05..2.0)).collect();
        let err = grad_check(&tensors, h, coords, seed ^ 13, |tape, vars| {
            let bound = BoundParams::from_pairs(
                names.iter().cloned().zip(vars[..names.len()].iter().copied()),
            );
            let logits = unet_forward(tape, &bound, &cfg, vars[names.len()])
                .map_err(|e| TensorError::Invalid(e.to_string()))?;
            tape.weighted_cross_entropy(logits, &targets, &weights)
        })?;
        report.push(("unet_weighted_ce".into(), err));
    }
    // composed: discriminator + BCE, probability map built by softmax
    {
        let cfg = DiscConfig::new(2);
        let disc = build_discriminator(&cfg, seed)?.cast::<f64>();
        let names: Vec<String> = disc.names();
        let mut tensors: Vec<Tensor<f64>> = disc.iter().map(|(_, t)| t.clone()).collect();
        tensors.push(randn(&mut rng, Shape::new(1, 2, 16, 16)));
        let err = grad_check(&tensors, h, coords, seed ^ 14, |tape, vars| {
            let bound = BoundParams::from_pairs(
                names.iter().cloned().zip(vars[..names.len()].iter().copied()),
            );
            let probs = tape.softmax_channels(vars[names.len()])?;
            let logit = disc_forward(tape, &bound, &cfg, probs)
                .map_err(|e| TensorError::Invalid(e.to_string()))?;
            tape.bce_with_logits(logit, 0.0)
        })?;
        report.push(("disc_bce".into(), err));
    }

    Ok(report)
}
