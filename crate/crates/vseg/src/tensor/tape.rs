//! Execution graph for reverse-mode differentiation.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the nodes
//! in reverse execution order exactly once, accumulating gradients
//! additively. A fresh tape is built per training step, which keeps the
//! lifetime story trivial and the replay deterministic.

use super::{Scalar, Shape, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Symmetric (k-1)/2 zero padding; preserves h, w at stride 1.
    Same,
    /// No padding.
    Valid,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    UpsampleNn {
        x: Var,
        factor: usize,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    WeightedSum {
        x: Var,
        coeffs: Vec<f64>,
    },
    WeightedCrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        weights: Vec<f64>,
        weight_sum: f64,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        target: f64,
    },
}

struct Node<T: Scalar> {
    shape: Shape,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass, addressable by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Copies a tensor onto the tape as a graph input.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape,
            value: t.data.clone(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> Result<Var, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "constant buffer of {} elements for shape {}",
                data.len(),
                shape
            )));
        }
        self.nodes.push(Node {
            shape,
            value: data,
            requires_grad: false,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0].as_f64()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Shape,
        value: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        debug_assert_eq!(value.len(), shape.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2D cross-correlation with square kernels and per-channel bias.
    ///
    /// `x`: (n, ci, h, w), `w`: (co, ci, k, k), `b`: (1, co, 1, 1).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: Pad,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        let k = ws.h;
        if ws.w != k {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel must be square, got {}",
                ws
            )));
        }
        if ws.c != xs.c {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel expects {} input channels, input has {}",
                ws.c, xs.c
            )));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(TensorError::ShapeMismatch(format!(
                "bias shape {} does not match {} output channels",
                bs, ws.n
            )));
        }
        if stride == 0 {
            return Err(TensorError::Invalid("stride must be >= 1".into()));
        }
        let pad = match pad {
            Pad::Valid => 0,
            Pad::Same => {
                if k % 2 == 0 {
                    return Err(TensorError::Invalid(
                        "same padding requires an odd kernel".into(),
                    ));
                }
                (k - 1) / 2
            }
        };
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(TensorError::ShapeMismatch(format!(
                "input {} too small for {}x{} kernel",
                xs, k, k
            )));
        }
        let oh = (xs.h + 2 * pad - k) / stride + 1;
        let ow = (xs.w + 2 * pad - k) / stride + 1;
        let out_shape = Shape::new(xs.n, ws.n, oh, ow);

        let cikk = xs.c * k * k;
        let pcount = oh * ow;
        let wdat: Vec<f64> = self.nodes[w.0].value.iter().map(|v| v.as_f64()).collect();
        let bdat: Vec<f64> = self.nodes[b.0].value.iter().map(|v| v.as_f64()).collect();
        let xval = &self.nodes[x.0].value;

        let mut out = vec![T::zero(); out_shape.len()];
        let mut cols = vec![0f64; cikk * pcount];
        let mut acc = vec![0f64; pcount];
        for s in 0..xs.n {
            im2col(
                &xval[s * xs.c * xs.h * xs.w..(s + 1) * xs.c * xs.h * xs.w],
                xs.c,
                xs.h,
                xs.w,
                k,
                stride,
                pad,
                oh,
                ow,
                &mut cols,
            );
            for o in 0..ws.n {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let wrow = &wdat[o * cikk..(o + 1) * cikk];
                for (j, &wj) in wrow.iter().enumerate() {
                    let col = &cols[j * pcount..(j + 1) * pcount];
                    for (a, &c) in acc.iter_mut().zip(col) {
                        *a += wj * c;
                    }
                }
                let base = (s * ws.n + o) * pcount;
                let bo = bdat[o];
                for (p, &a) in acc.iter().enumerate() {
                    out[base + p] = T::from_f64(a + bo);
                }
            }
        }

        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            "conv2d",
            out_shape,
            out,
            requires,
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    /// Per-window max with stride-aligned windows; ties go to the first
    /// element in row-major order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if k == 0 || stride == 0 {
            return Err(TensorError::Invalid("pool size and stride must be >= 1".into()));
        }
        if xs.h % stride != 0 || xs.w % stride != 0 {
            return Err(TensorError::IndivisibleSpatialDims(xs.h, xs.w, stride));
        }
        let oh = xs.h / stride;
        let ow = xs.w / stride;
        let out_shape = Shape::new(xs.n, xs.c, oh, ow);
        let xval = &self.nodes[x.0].value;

        let mut out = vec![T::zero(); out_shape.len()];
        let mut argmax = vec![0u32; out_shape.len()];
        for s in 0..xs.n {
            for c in 0..xs.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut arg = 0usize;
                        for iy in oy * stride..(oy * stride + k).min(xs.h) {
                            for ix in ox * stride..(ox * stride + k).min(xs.w) {
                                let idx = xs.at(s, c, iy, ix);
                                if xval[idx] > best {
                                    best = xval[idx];
                                    arg = idx;
                                }
                            }
                        }
                        let oidx = out_shape.at(s, c, oy, ox);
                        out[oidx] = best;
                        argmax[oidx] = arg as u32;
                    }
                }
            }
        }
        let requires = self.requires(x);
        self.push("maxpool2d", out_shape, out, requires, Op::MaxPool2d { x, argmax })
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nn(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        if factor == 0 {
            return Err(TensorError::Invalid("upsample factor must be >= 1".into()));
        }
        let xs = self.shape(x);
        let out_shape = Shape::new(xs.n, xs.c, xs.h * factor, xs.w * factor);
        let xval = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); out_shape.len()];
        for s in 0..xs.n {
            for c in 0..xs.c {
                for y in 0..out_shape.h {
                    for x_ in 0..out_shape.w {
                        out[out_shape.at(s, c, y, x_)] =
                            xval[xs.at(s, c, y / factor, x_ / factor)];
                    }
                }
            }
        }
        let requires = self.requires(x);
        self.push("upsample_nn", out_shape, out, requires, Op::UpsampleNn { x, factor })
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(TensorError::ShapeMismatch(format!(
                "concat requires matching n/h/w, got {} and {}",
                sa, sb
            )));
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let plane = sa.h * sa.w;
        let mut out = vec![T::zero(); out_shape.len()];
        for s in 0..sa.n {
            let dst = &mut out[s * out_shape.c * plane..(s + 1) * out_shape.c * plane];
            dst[..sa.c * plane]
                .copy_from_slice(&self.nodes[a.0].value[s * sa.c * plane..(s + 1) * sa.c * plane]);
            dst[sa.c * plane..]
                .copy_from_slice(&self.nodes[b.0].value[s * sb.c * plane..(s + 1) * sb.c * plane]);
        }
        let requires = self.requires(a) || self.requires(b);
        self.push(
            "concat_channels",
            out_shape,
            out,
            requires,
            Op::ConcatChannels { a, b },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let requires = self.requires(x);
        self.push("relu", xs, out, requires, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let s = T::from_f64(slope);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > T::zero() { v } else { s * v })
            .collect();
        let requires = self.requires(x);
        self.push("leaky_relu", xs, out, requires, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| T::from_f64(stable_sigmoid(v.as_f64())))
            .collect();
        let requires = self.requires(x);
        self.push("sigmoid", xs, out, requires, Op::Sigmoid { x })
    }

    /// Softmax across the channel axis, per pixel, with max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let xval = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xs.len()];
        let plane = xs.h * xs.w;
        for s in 0..xs.n {
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for c in 0..xs.c {
                    m = m.max(xval[(s * xs.c + c) * plane + p].as_f64());
                }
                let mut sum = 0f64;
                for c in 0..xs.c {
                    sum += (xval[(s * xs.c + c) * plane + p].as_f64() - m).exp();
                }
                for c in 0..xs.c {
                    let e = (xval[(s * xs.c + c) * plane + p].as_f64() - m).exp();
                    out[(s * xs.c + c) * plane + p] = T::from_f64(e / sum);
                }
            }
        }
        let requires = self.requires(x);
        self.push("softmax_channels", xs, out, requires, Op::SoftmaxChannels { x })
    }

    /// Spatial mean per channel, (n, c, h, w) -> (n, c, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let out_shape = Shape::new(xs.n, xs.c, 1, 1);
        let plane = xs.h * xs.w;
        let xval = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); out_shape.len()];
        for s in 0..xs.n {
            for c in 0..xs.c {
                let base = (s * xs.c + c) * plane;
                let sum: f64 = xval[base..base + plane].iter().map(|v| v.as_f64()).sum();
                out[s * xs.c + c] = T::from_f64(sum / plane as f64);
            }
        }
        let requires = self.requires(x);
        self.push("global_avg_pool", out_shape, out, requires, Op::GlobalAvgPool { x })
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch(format!(
                "add requires equal shapes, got {} and {}",
                sa, sb
            )));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        self.push("add", sa, out, requires, Op::Add { a, b })
    }

    /// Scalar dot product with fixed coefficients; reduces any node to a
    /// scalar for gradient checking.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[f64]) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if coeffs.len() != xs.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} coefficients for shape {}",
                coeffs.len(),
                xs
            )));
        }
        let total: f64 = self.nodes[x.0]
            .value
            .iter()
            .zip(coeffs)
            .map(|(v, c)| v.as_f64() * c)
            .sum();
        let requires = self.requires(x);
        self.push(
            "weighted_sum",
            Shape::new(1, 1, 1, 1),
            vec![T::from_f64(total)],
            requires,
            Op::WeightedSum {
                x,
                coeffs: coeffs.to_vec(),
            },
        )
    }

    /// Pixel-weighted softmax cross-entropy.
    ///
    /// `L = (1 / sum_p w_p) * sum_p w_p * (-log softmax(logits)_{y(p)}(p))`
    /// where `targets` and `weights` are (n, h, w) planes flattened row-major.
    /// Weights are constants and receive no gradient.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u8],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let ls = self.shape(logits);
        let plane = ls.h * ls.w;
        let pixels = ls.n * plane;
        if targets.len() != pixels || weights.len() != pixels {
            return Err(TensorError::ShapeMismatch(format!(
                "{} targets / {} weights for {} pixels",
                targets.len(),
                weights.len(),
                pixels
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= ls.c) {
            return Err(TensorError::LabelOutOfRange(bad, ls.c));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(TensorError::Invalid(
                "pixel weights must be finite and non-negative".into(),
            ));
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(TensorError::AllZeroWeights);
        }

        let xval = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); ls.len()];
        let mut loss = 0f64;
        for s in 0..ls.n {
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for c in 0..ls.c {
                    m = m.max(xval[(s * ls.c + c) * plane + p].as_f64());
                }
                let mut sum = 0f64;
                for c in 0..ls.c {
                    sum += (xval[(s * ls.c + c) * plane + p].as_f64() - m).exp();
                }
                let lse = m + sum.ln();
                for c in 0..ls.c {
                    let z = xval[(s * ls.c + c) * plane + p].as_f64();
                    probs[(s * ls.c + c) * plane + p] = T::from_f64((z - lse).exp());
                }
                let pixel = s * plane + p;
                let zy = xval[(s * ls.c + targets[pixel] as usize) * plane + p].as_f64();
                loss += weights[pixel] * (lse - zy);
            }
        }
        loss /= weight_sum;

        let requires = self.requires(logits);
        self.push(
            "weighted_cross_entropy",
            Shape::new(1, 1, 1, 1),
            vec![T::from_f64(loss)],
            requires,
            Op::WeightedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                weight_sum,
                probs,
            },
        )
    }

    /// Numerically stable binary cross-entropy on raw logits, averaged over
    /// the batch. `logits` must be (n, 1, 1, 1); `target` is 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Result<Var, TensorError> {
        let ls = self.shape(logits);
        if ls.c != 1 || ls.h != 1 || ls.w != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "bce expects one logit per sample, got {}",
                ls
            )));
        }
        let mut loss = 0f64;
        for v in &self.nodes[logits.0].value {
            let z = v.as_f64();
            // max(z, 0) - z*t + ln(1 + exp(-|z|))
            loss += z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        }
        loss /= ls.n as f64;
        let requires = self.requires(logits);
        self.push(
            "bce_with_logits",
            Shape::new(1, 1, 1, 1),
            vec![T::from_f64(loss)],
            requires,
            Op::BceWithLogits { logits, target },
        )
    }

    /// Reverse pass from a scalar node; returns per-node gradients for the
    /// graph inputs (leaves) reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.nodes[loss.0].shape.len() != 1 {
            return Err(TensorError::NonScalarOutput);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.backward_conv2d(*x, *w, *b, *stride, *pad, node, &g, &mut grads);
                }
                Op::MaxPool2d { x, argmax } => {
                    if self.requires(*x) {
                        let gx = ensure(&mut grads, x.0, self.nodes[x.0].value.len());
                        for (o, &arg) in argmax.iter().enumerate() {
                            gx[arg as usize] = gx[arg as usize] + g[o];
                        }
                    }
                }
                Op::UpsampleNn { x, factor } => {
                    if self.requires(*x) {
                        let xs = self.nodes[x.0].shape;
                        let os = node.shape;
                        let gx = ensure(&mut grads, x.0, xs.len());
                        for s in 0..os.n {
                            for c in 0..os.c {
                                for y in 0..os.h {
                                    for x_ in 0..os.w {
                                        let src = xs.at(s, c, y / factor, x_ / factor);
                                        gx[src] = gx[src] + g[os.at(s, c, y, x_)];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let sa = self.nodes[a.0].shape;
                    let sb = self.nodes[b.0].shape;
                    let plane = sa.h * sa.w;
                    if self.requires(*a) {
                        let ga = ensure(&mut grads, a.0, sa.len());
                        for s in 0..sa.n {
                            let src = s * node.shape.c * plane;
                            let dst = s * sa.c * plane;
                            for i in 0..sa.c * plane {
                                ga[dst + i] = ga[dst + i] + g[src + i];
                            }
                        }
                    }
                    if self.requires(*b) {
                        let gb = ensure(&mut grads, b.0, sb.len());
                        for s in 0..sb.n {
                            let src = s * node.shape.c * plane + sa.c * plane;
                            let dst = s * sb.c * plane;
                            for i in 0..sb.c * plane {
                                gb[dst + i] = gb[dst + i] + g[src + i];
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.requires(*x) {
                        let xval = &self.nodes[x.0].value;
                        let gx = ensure(&mut grads, x.0, xval.len());
                        for i in 0..xval.len() {
                            if xval[i] > T::zero() {
                                gx[i] = gx[i] + g[i];
                            }
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if self.requires(*x) {
                        let s = T::from_f64(*slope);
                        let xval = &self.nodes[x.0].value;
                        let gx = ensure(&mut grads, x.0, xval.len());
                        for i in 0..xval.len() {
                            let d = if xval[i] > T::zero() { g[i] } else { s * g[i] };
                            gx[i] = gx[i] + d;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if self.requires(*x) {
                        let y = &node.value;
                        let gx = ensure(&mut grads, x.0, y.len());
                        for i in 0..y.len() {
                            gx[i] = gx[i] + g[i] * y[i] * (T::one() - y[i]);
                        }
                    }
                }
                Op::SoftmaxChannels { x } => {
                    if self.requires(*x) {
                        let xs = self.nodes[x.0].shape;
                        let plane = xs.h * xs.w;
                        let y = &node.value;
                        let gx = ensure(&mut grads, x.0, y.len());
                        for s in 0..xs.n {
                            for p in 0..plane {
                                let mut dot = 0f64;
                                for c in 0..xs.c {
                                    let i = (s * xs.c + c) * plane + p;
                                    dot += g[i].as_f64() * y[i].as_f64();
                                }
                                for c in 0..xs.c {
                                    let i = (s * xs.c + c) * plane + p;
                                    let d = y[i].as_f64() * (g[i].as_f64() - dot);
                                    gx[i] = gx[i] + T::from_f64(d);
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.requires(*x) {
                        let xs = self.nodes[x.0].shape;
                        let plane = xs.h * xs.w;
                        let scale = T::from_f64(1.0 / plane as f64);
                        let gx = ensure(&mut grads, x.0, xs.len());
                        for s in 0..xs.n {
                            for c in 0..xs.c {
                                let go = g[s * xs.c + c] * scale;
                                let base = (s * xs.c + c) * plane;
                                for i in 0..plane {
                                    gx[base + i] = gx[base + i] + go;
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for side in [a, b] {
                        if self.requires(*side) {
                            let gs = ensure(&mut grads, side.0, g.len());
                            for i in 0..g.len() {
                                gs[i] = gs[i] + g[i];
                            }
                        }
                    }
                }
                Op::WeightedSum { x, coeffs } => {
                    if self.requires(*x) {
                        let g0 = g[0].as_f64();
                        let gx = ensure(&mut grads, x.0, coeffs.len());
                        for (gi, &c) in gx.iter_mut().zip(coeffs) {
                            *gi = *gi + T::from_f64(g0 * c);
                        }
                    }
                }
                Op::WeightedCrossEntropy {
                    logits,
                    targets,
                    weights,
                    weight_sum,
                    probs,
                } => {
                    if self.requires(*logits) {
                        let ls = self.nodes[logits.0].shape;
                        let plane = ls.h * ls.w;
                        let g0 = g[0].as_f64();
                        let gx = ensure(&mut grads, logits.0, ls.len());
                        for s in 0..ls.n {
                            for p in 0..plane {
                                let pixel = s * plane + p;
                                let scale = g0 * weights[pixel] / weight_sum;
                                if scale == 0.0 {
                                    continue;
                                }
                                let y = targets[pixel] as usize;
                                for c in 0..ls.c {
                                    let i = (s * ls.c + c) * plane + p;
                                    let indicator = if c == y { 1.0 } else { 0.0 };
                                    let d = scale * (probs[i].as_f64() - indicator);
                                    gx[i] = gx[i] + T::from_f64(d);
                                }
                            }
                        }
                    }
                }
                Op::BceWithLogits { logits, target } => {
                    if self.requires(*logits) {
                        let zval = &self.nodes[logits.0].value;
                        let n = zval.len() as f64;
                        let g0 = g[0].as_f64();
                        let gx = ensure(&mut grads, logits.0, zval.len());
                        for i in 0..zval.len() {
                            let d = g0 * (stable_sigmoid(zval[i].as_f64()) - target) / n;
                            gx[i] = gx[i] + T::from_f64(d);
                        }
                    }
                }
            }
        }

        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        node: &Node<T>,
        g: &[T],
        grads: &mut Vec<Option<Vec<T>>>,
    ) {
        let xs = self.nodes[x.0].shape;
        let ws = self.nodes[w.0].shape;
        let os = node.shape;
        let k = ws.h;
        let cikk = xs.c * k * k;
        let pcount = os.h * os.w;
        let (need_x, need_w, need_b) = (self.requires(x), self.requires(w), self.requires(b));

        let wdat: Vec<f64> = self.nodes[w.0].value.iter().map(|v| v.as_f64()).collect();
        let xval = &self.nodes[x.0].value;

        let mut dw = vec![0f64; if need_w { ws.len() } else { 0 }];
        let mut db = vec![0f64; if need_b { ws.n } else { 0 }];
        let mut dx = vec![0f64; if need_x { xs.len() } else { 0 }];

        let mut cols = vec![0f64; if need_w { cikk * pcount } else { 0 }];
        let mut dcols = vec![0f64; if need_x { cikk * pcount } else { 0 }];
        let mut grow = vec![0f64; pcount];

        for s in 0..xs.n {
            if need_w {
                im2col(
                    &xval[s * xs.c * xs.h * xs.w..(s + 1) * xs.c * xs.h * xs.w],
                    xs.c,
                    xs.h,
                    xs.w,
                    k,
                    stride,
                    pad,
                    os.h,
                    os.w,
                    &mut cols,
                );
            }
            if need_x {
                dcols.iter_mut().for_each(|v| *v = 0.0);
            }
            for o in 0..ws.n {
                let base = (s * ws.n + o) * pcount;
                for (p, gv) in grow.iter_mut().enumerate() {
                    *gv = g[base + p].as_f64();
                }
                if need_b {
                    db[o] += grow.iter().sum::<f64>();
                }
                if need_w {
                    let drow = &mut dw[o * cikk..(o + 1) * cikk];
                    for (j, dwj) in drow.iter_mut().enumerate() {
                        let col = &cols[j * pcount..(j + 1) * pcount];
                        let mut acc = 0f64;
                        for (gv, cv) in grow.iter().zip(col) {
                            acc += gv * cv;
                        }
                        *dwj += acc;
                    }
                }
                if need_x {
                    let wrow = &wdat[o * cikk..(o + 1) * cikk];
                    for (j, &wj) in wrow.iter().enumerate() {
                        let dcol = &mut dcols[j * pcount..(j + 1) * pcount];
                        for (dv, gv) in dcol.iter_mut().zip(&grow) {
                            *dv += wj * gv;
                        }
                    }
                }
            }
            if need_x {
                // col2im scatter back into the input gradient.
                let sbase = s * xs.c * xs.h * xs.w;
                for c in 0..xs.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let j = (c * k + ky) * k + kx;
                            let dcol = &dcols[j * pcount..(j + 1) * pcount];
                            for oy in 0..os.h {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let rbase = sbase + (c * xs.h + iy as usize) * xs.w;
                                for ox in 0..os.w {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    dx[rbase + ix as usize] += dcol[oy * os.w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }

        if need_x {
            let gx = ensure(grads, x.0, xs.len());
            for (gi, &d) in gx.iter_mut().zip(&dx) {
                *gi = *gi + T::from_f64(d);
            }
        }
        if need_w {
            let gw = ensure(grads, w.0, ws.len());
            for (gi, &d) in gw.iter_mut().zip(&dw) {
                *gi = *gi + T::from_f64(d);
            }
        }
        if need_b {
            let gb = ensure(grads, b.0, ws.n);
            for (gi, &d) in gb.iter_mut().zip(&db) {
                *gi = *gi + T::from_f64(d);
            }
        }
    }
}

fn ensure<T: Scalar>(grads: &mut Vec<Option<Vec<T>>>, id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Unrolls `k x k` patches of one sample into a `(ci*k*k) x (oh*ow)` matrix
/// in f64, zero-filling out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let pcount = oh * ow;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let j = (c * k + ky) * k + kx;
                let row = &mut cols[j * pcount..(j + 1) * pcount];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[base + ix as usize].as_f64()
                        };
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct 6-loop convolution, the reference the im2col path must match.
    fn naive_conv2d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (xs, ws) = (x.shape, w.shape);
        let k = ws.h;
        let oh = (xs.h + 2 * pad - k) / stride + 1;
        let ow = (xs.w + 2 * pad - k) / stride + 1;
        let mut out = vec![0f64; xs.n * ws.n * oh * ow];
        for s in 0..xs.n {
            for o in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data[o];
                        for c in 0..xs.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= xs.h as isize || ix < 0 || ix >= xs.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x.data[xs.at(s, c, iy as usize, ix as usize)]
                                        * w.data[ws.at(o, c, ky, kx)];
                                }
                            }
                        }
                        out[((s * ws.n + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64));
        let w = tape.leaf(&Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64));
        let b = tape.leaf(&Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(x, w, b, 1, Pad::Valid).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 1, 1));
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn identity_one_by_one_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let xt = randn(&mut rng, Shape::new(1, 1, 4, 5));
        let x = tape.leaf(&xt);
        let w = tape.leaf(&Tensor::full(Shape::new(1, 1, 1, 1), 1.0f64));
        let b = tape.leaf(&Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(x, w, b, 1, Pad::Same).unwrap();
        assert_eq!(tape.value(y), xt.data.as_slice());
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1usize, Pad::Valid), (1, Pad::Same), (2, Pad::Same)] {
            let xt = randn(&mut rng, Shape::new(2, 2, 6, 6));
            let wt = randn(&mut rng, Shape::new(3, 2, 3, 3));
            let bt = randn(&mut rng, Shape::new(1, 3, 1, 1));
            let mut tape = Tape::new();
            let x = tape.leaf(&xt);
            let w = tape.leaf(&wt);
            let b = tape.leaf(&bt);
            let y = tape.conv2d(x, w, b, stride, pad).unwrap();
            let p = match pad {
                Pad::Same => 1,
                Pad::Valid => 0,
            };
            let want = naive_conv2d(&xt, &wt, &bt, stride, p);
            for (got, want) in tape.value(y).iter().zip(want) {
                assert!((got - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = tape.leaf(&Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let b = tape.leaf(&Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(matches!(
            tape.conv2d(x, w, b, 1, Pad::Same),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[4.0]);

        // Ties route the gradient to the first element of each window.
        let mut tape = Tape::new();
        let xt = Tensor::full(Shape::new(1, 1, 2, 2), 1.0f64).with_grad();
        let x = tape.leaf(&xt);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let s = tape.weighted_sum(y, &[1.0]).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_reference_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = randn(&mut rng, Shape::new(1, 1, 4, 4));
        let mut tape = Tape::new();
        let x = tape.leaf(&xt);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let want = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| xt.data[(oy * 2 + dy) * 4 + ox * 2 + dx])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(tape.value(y)[oy * 2 + ox], want);
            }
        }
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(matches!(
            tape.maxpool2d(x, 2, 2),
            Err(TensorError::IndivisibleSpatialDims(3, 4, 2))
        ));
    }

    #[test]
    fn upsample_identity_and_block_sum() {
        let mut tape = Tape::new();
        let xt = t(Shape::new(1, 1, 1, 1), vec![2.5]).with_grad();
        let x = tape.leaf(&xt);
        let same = tape.upsample_nn(x, 1).unwrap();
        assert_eq!(tape.value(same), &[2.5]);

        let up = tape.upsample_nn(x, 2).unwrap();
        assert_eq!(tape.value(up), &[2.5; 4]);
        let s = tape.weighted_sum(up, &[1.0; 4]).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn concat_shapes_and_backward_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let at = randn(&mut rng, Shape::new(1, 2, 4, 4)).with_grad();
        let bt = randn(&mut rng, Shape::new(1, 3, 4, 4)).with_grad();
        let mut tape = Tape::new();
        let a = tape.leaf(&at);
        let b = tape.leaf(&bt);
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 5, 4, 4));
        assert_eq!(&tape.value(y)[..32], at.data.as_slice());
        assert_eq!(&tape.value(y)[32..], bt.data.as_slice());

        let coeffs: Vec<f64> = (0..80).map(|i| i as f64 * 0.13 - 3.0).collect();
        let s = tape.weighted_sum(y, &coeffs).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &coeffs[..32]);
        assert_eq!(grads.get(b).unwrap(), &coeffs[32..]);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.0]);

        let z = tape.leaf(&t(Shape::new(1, 1, 1, 1), vec![0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s), &[0.5]);

        let l = tape.leaf(&t(Shape::new(1, 2, 1, 1), vec![0.7, 0.7]));
        let sm = tape.softmax_channels(l).unwrap();
        assert_eq!(tape.value(sm), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_channels_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = randn(&mut rng, Shape::new(2, 4, 3, 3));
        let mut tape = Tape::new();
        let x = tape.leaf(&xt);
        let y = tape.softmax_channels(x).unwrap();
        let v = tape.value(y);
        for s in 0..2 {
            for p in 0..9 {
                let sum: f64 = (0..4).map(|c| v[(s * 4 + c) * 9 + p]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_weights_equal_plain_mean_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = randn(&mut rng, Shape::new(1, 3, 4, 4));
        let targets: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();

        let mut tape = Tape::new();
        let x = tape.leaf(&xt);
        let uniform = tape
            .weighted_cross_entropy(x, &targets, &vec![1.0; 16])
            .unwrap();

        // Plain mean of -log softmax at the target class.
        let mut want = 0f64;
        for p in 0..16 {
            let z: Vec<f64> = (0..3).map(|c| xt.data[c * 16 + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            want += lse - z[targets[p] as usize];
        }
        want /= 16.0;
        assert!((tape.scalar_value(uniform) - want).abs() < 1e-9);
    }

    #[test]
    fn symmetric_two_class_pixel_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(Shape::new(1, 2, 1, 1), vec![0.0, 0.0]));
        let loss = tape.weighted_cross_entropy(x, &[0], &[1.0]).unwrap();
        assert!((tape.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(Shape::new(1, 2, 1, 2)));
        assert!(matches!(
            tape.weighted_cross_entropy(x, &[0, 1], &[0.0, 0.0]),
            Err(TensorError::AllZeroWeights)
        ));
        assert!(matches!(
            tape.weighted_cross_entropy(x, &[0, 2], &[1.0, 1.0]),
            Err(TensorError::LabelOutOfRange(2, 2))
        ));
    }

    #[test]
    fn cross_entropy_is_invariant_to_per_pixel_logit_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = randn(&mut rng, Shape::new(1, 3, 2, 2));
        let targets: Vec<u8> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..2.0)).collect();

        let mut shifted = xt.clone();
        for p in 0..4 {
            let delta = rng.gen_range(-3.0..3.0);
            for c in 0..3 {
                shifted.data[c * 4 + p] += delta;
            }
        }

        let mut tape = Tape::new();
        let a = tape.leaf(&xt);
        let b = tape.leaf(&shifted);
        let la = tape.weighted_cross_entropy(a, &targets, &weights).unwrap();
        let lb = tape.weighted_cross_entropy(b, &targets, &weights).unwrap();
        assert!((tape.scalar_value(la) - tape.scalar_value(lb)).abs() < 1e-5);
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let zt = t(Shape::new(1, 1, 1, 1), vec![0.0]).with_grad();
        let z = tape.leaf(&zt);
        let loss = tape.bce_with_logits(z, 1.0).unwrap();
        assert!((tape.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(z).unwrap()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_is_bitwise_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = randn(&mut rng, Shape::new(1, 2, 4, 4)).with_grad();
        let wt = randn(&mut rng, Shape::new(2, 2, 3, 3)).with_grad();
        let bt = randn(&mut rng, Shape::new(1, 2, 1, 1)).with_grad();
        let targets: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2)).collect();
        let weights: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..2.0)).collect();

        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&xt);
            let w = tape.leaf(&wt);
            let b = tape.leaf(&bt);
            let y = tape.conv2d(x, w, b, 1, Pad::Same).unwrap();
            let r = tape.relu(y).unwrap();
            let loss = tape.weighted_cross_entropy(r, &targets, &weights).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                grads.get(x).unwrap().to_vec(),
                grads.get(w).unwrap().to_vec(),
                grads.get(b).unwrap().to_vec(),
            )
        };
        let first = run();
        let second = run();
        assert_eq!(first.0, second.0);
        assert_eq!(first.1, second.1);
        assert_eq!(first.2, second.2);
    }

    #[test]
    fn non_finite_forward_is_a_hard_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(Shape::new(1, 1, 1, 1), vec![1e308]));
        assert!(matches!(
            tape.add(x, x),
            Err(TensorError::NonFinite("add"))
        ));
    }
}
