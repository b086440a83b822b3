//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order; `backward` walks
//! the tape once in reverse. Calling `backward` a second time on the same
//! graph is an error: the tape is consumed by the first pass. Build a fresh
//! graph per training step.

use rand::Rng;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::{shape_err, EngineError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        filters: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        filters: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Mfm {
        input: Var,
        /// true where the first channel half won.
        first_won: Vec<bool>,
        half: usize,
        inner: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Identity {
        input: Var,
    },
    PadHw {
        input: Var,
        from: [usize; 4],
        padded: (usize, usize),
    },
    CropHw {
        input: Var,
        from: [usize; 4],
        kept: (usize, usize),
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Mse {
        pred: Var,
        diff: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. One graph per forward/backward pass; confined to a
/// single thread.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(shape_err(op, "rank", format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn rank2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, d] => Ok([n, d]),
        ref s => Err(shape_err(op, "rank", format!("expected [N,D], got {s:?}"))),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable leaf; its gradient is kept after `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    fn leaf(&mut self, mut value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite { op: "leaf" });
        }
        value.set_grad(None)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.value(v).len()],
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, expect: usize) -> Result<()> {
        if let Some(b) = bias {
            let shape = self.shape(b);
            if shape != [expect] {
                return Err(shape_err(
                    op,
                    "bias",
                    format!("expected [{expect}], got {shape:?}"),
                ));
            }
        }
        Ok(())
    }

    /// Strided 2-D cross-correlation. `weight` is `[F, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = rank4(OP, self.value(input))?;
        let [f, wc, kh, kw] = rank4(OP, self.value(weight))?;
        if wc != c {
            return Err(shape_err(
                OP,
                "channel",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        self.check_bias(OP, bias, f)?;
        let geom = ConvGeom::forward(OP, c, (h, w), (kh, kw), stride, padding)?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * f * cols];
        let mut col = vec![T::zero(); rows * cols];
        {
            let x = self.value(input).values();
            let wv = self.value(weight).values();
            let bv = bias.map(|b| self.value(b).values());
            for s in 0..n {
                im2col(&x[s * geom.image_len()..(s + 1) * geom.image_len()], &geom, &mut col);
                let o = &mut out[s * f * cols..(s + 1) * f * cols];
                T::gemm(f, rows, cols, T::one(), wv, false, &col, false, T::zero(), o);
                if let Some(bv) = bv {
                    for (fi, plane) in o.chunks_mut(cols).enumerate() {
                        let b = bv[fi];
                        plane.iter_mut().for_each(|v| *v += b);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, f, geom.col_h, geom.col_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            OP,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch: n,
                filters: f,
            },
            &inputs,
        )
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with respect
    /// to its input. `weight` is `[F, C, kh, kw]` where `F` is the input
    /// channel count and `C` the output channel count.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let [n, f, h, w] = rank4(OP, self.value(input))?;
        let [wf, c, kh, kw] = rank4(OP, self.value(weight))?;
        if wf != f {
            return Err(shape_err(
                OP,
                "channel",
                format!("input has {f} channels but weight expects {wf}"),
            ));
        }
        self.check_bias(OP, bias, c)?;
        let geom = ConvGeom::transposed(OP, c, (h, w), (kh, kw), stride, padding)?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let img = geom.image_len();
        let mut out = vec![T::zero(); n * img];
        let mut col = vec![T::zero(); rows * cols];
        {
            let x = self.value(input).values();
            let wv = self.value(weight).values();
            let bv = bias.map(|b| self.value(b).values());
            for s in 0..n {
                let xs = &x[s * f * cols..(s + 1) * f * cols];
                T::gemm(rows, f, cols, T::one(), wv, true, xs, false, T::zero(), &mut col);
                let o = &mut out[s * img..(s + 1) * img];
                col2im(&col, &geom, o);
                if let Some(bv) = bv {
                    for (ci, plane) in o.chunks_mut(geom.image_h * geom.image_w).enumerate() {
                        let b = bv[ci];
                        plane.iter_mut().for_each(|v| *v += b);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, geom.image_h, geom.image_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            OP,
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                batch: n,
                filters: f,
            },
            &inputs,
        )
    }

    /// Per-channel batch normalization over `[N, C, H, W]`.
    ///
    /// In train mode batch statistics are used and `state` is updated with
    /// `momentum` (the running variance uses the unbiased estimate). In eval
    /// mode only the running statistics are read.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let [n, c, h, w] = rank4(OP, self.value(input))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(
                    OP,
                    "channel",
                    format!("{name} has shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(shape_err(OP, "channel", "running statistics length mismatch"));
        }
        if !(0.0..=1.0).contains(&momentum) || eps < 0.0 {
            return Err(EngineError::Param(format!(
                "batchnorm2d momentum {momentum} / eps {eps} out of range"
            )));
        }
        let plane = h * w;
        let count = n * plane;
        if train && count < 2 {
            return Err(EngineError::BatchTooSmall { count });
        }
        let x = self.value(input).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, istd) = if train {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sum += x[base..base + plane].iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut ss = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    ss += x[base..base + plane]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = ss / count as f64;
                let unbiased = ss / (count - 1) as f64;
                state.running_mean[ch] =
                    T::lit((1.0 - momentum) * state.running_mean[ch].to_f64() + momentum * mean);
                state.running_var[ch] =
                    T::lit((1.0 - momentum) * state.running_var[ch].to_f64() + momentum * unbiased);
                (mean, 1.0 / (var + eps).sqrt())
            } else {
                let rv = state.running_var[ch].to_f64();
                (state.running_mean[ch].to_f64(), 1.0 / (rv + eps).sqrt())
            };
            if !istd.is_finite() {
                return Err(EngineError::NonFinite { op: OP });
            }
            inv_std[ch] = T::lit(istd);
            let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean_t) * istd_t;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            OP,
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        )
    }

    /// `max(x, slope * x)`; the derivative at 0 is 1.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(EngineError::Param(format!(
                "leaky_relu slope {slope} outside [0, 1)"
            )));
        }
        let s = T::lit(slope);
        let x = self.value(input);
        let value = x.map(|v| if v >= T::zero() { v } else { s * v });
        self.push("leaky_relu", value, Op::LeakyRelu { input, slope: s }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.leaky_relu(input, 0.0)
    }

    /// Max-Feature-Map over the channel axis of `[N, 2K, H, W]` or `[N, 2K]`:
    /// output channel k is `max(x[k], x[k + K])`, ties going to the first half.
    pub fn mfm(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "mfm";
        let shape = self.shape(input).to_vec();
        let (n, c, inner) = match shape.as_slice() {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            s => return Err(shape_err(OP, "rank", format!("expected rank 2 or 4, got {s:?}"))),
        };
        if c % 2 != 0 {
            return Err(shape_err(
                OP,
                "channel",
                format!("channel count {c} is odd"),
            ));
        }
        let half = c / 2;
        let x = self.value(input).values();
        let mut out = Vec::with_capacity(n * half * inner);
        let mut first_won = Vec::with_capacity(n * half * inner);
        for s in 0..n {
            let base = s * c * inner;
            let (a, b) = x[base..base + c * inner].split_at(half * inner);
            for (&p, &q) in a.iter().zip(b) {
                let first = p >= q;
                first_won.push(first);
                out.push(if first { p } else { q });
            }
        }
        let mut out_shape = shape;
        out_shape[1] = half;
        let value = Tensor::new(out_shape, out)?;
        self.push(
            OP,
            value,
            Op::Mfm {
                input,
                first_won,
                half,
                inner,
            },
            &[input],
        )
    }

    /// Window maximum without padding; the gradient goes to the first
    /// maximal element of each window (row-major scan).
    pub fn maxpool2d(&mut self, input: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let [n, c, h, w] = rank4(OP, self.value(input))?;
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(EngineError::Param("maxpool2d kernel and stride must be >= 1".into()));
        }
        if kernel.0 > h {
            return Err(shape_err(OP, "height", format!("kernel {} > input {h}", kernel.0)));
        }
        if kernel.1 > w {
            return Err(shape_err(OP, "width", format!("kernel {} > input {w}", kernel.1)));
        }
        let oh = (h - kernel.0) / stride.0 + 1;
        let ow = (w - kernel.1) / stride.1 + 1;
        let x = self.value(input).values();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane_idx in 0..n * c {
            let base = plane_idx * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = base + (i * stride.0) * w + j * stride.1;
                    let mut best = x[best_idx];
                    for di in 0..kernel.0 {
                        let row = base + (i * stride.0 + di) * w + j * stride.1;
                        for (dj, &v) in x[row..row + kernel.1].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_idx = row + dj;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(OP, value, Op::MaxPool { input, argmax }, &[input])
    }

    /// `input [N, D] · weight [D, M] + bias [M]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "affine";
        let [n, d] = rank2(OP, self.value(input))?;
        let [wd, m] = rank2(OP, self.value(weight))?;
        if wd != d {
            return Err(shape_err(
                OP,
                "inner",
                format!("input width {d} does not match weight rows {wd}"),
            ));
        }
        self.check_bias(OP, Some(bias), m)?;
        let mut out = vec![T::zero(); n * m];
        {
            let x = self.value(input).values();
            let wv = self.value(weight).values();
            let bv = self.value(bias).values();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
            T::gemm(n, d, m, T::one(), x, false, wv, false, T::one(), &mut out);
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push(OP, value, Op::Affine { input, weight, bias }, &[input, weight, bias])
    }

    /// Inverted dropout. Eval mode and `p == 0` pass values through unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(EngineError::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            let value = self.value(input).clone();
            return self.push("dropout", value, Op::Identity { input }, &[input]);
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let values = x.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), values)?;
        self.push("dropout", value, Op::Dropout { input, mask }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Identity { input }, &[input])
    }

    /// Zero-pad the bottom and right edges of `[N, C, H, W]`.
    pub fn pad_hw(&mut self, input: Var, extra_h: usize, extra_w: usize) -> Result<Var> {
        let from = rank4("pad_hw", self.value(input))?;
        let [n, c, h, w] = from;
        let (nh, nw) = (h + extra_h, w + extra_w);
        let x = self.value(input).values();
        let mut out = vec![T::zero(); n * c * nh * nw];
        for p in 0..n * c {
            for i in 0..h {
                let src = &x[(p * h + i) * w..(p * h + i + 1) * w];
                out[(p * nh + i) * nw..(p * nh + i) * nw + w].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![n, c, nh, nw], out)?;
        self.push(
            "pad_hw",
            value,
            Op::PadHw {
                input,
                from,
                padded: (nh, nw),
            },
            &[input],
        )
    }

    /// Keep the top-left `h x w` window of `[N, C, H, W]`.
    pub fn crop_hw(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        const OP: &str = "crop_hw";
        let from = rank4(OP, self.value(input))?;
        let [n, c, ih, iw] = from;
        if h == 0 || h > ih {
            return Err(shape_err(OP, "height", format!("cannot crop {ih} rows to {h}")));
        }
        if w == 0 || w > iw {
            return Err(shape_err(OP, "width", format!("cannot crop {iw} columns to {w}")));
        }
        let x = self.value(input).values();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for i in 0..h {
                out.extend_from_slice(&x[(p * ih + i) * iw..(p * ih + i) * iw + w]);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            OP,
            value,
            Op::CropHw {
                input,
                from,
                kept: (h, w),
            },
            &[input],
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self
            .value(input)
            .values()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push("sum", Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// `Σ input[i] * weights[i]` for constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(shape_err(
                "weighted_sum",
                "length",
                format!("{} weights for {} values", weights.len(), self.value(input).len()),
            ));
        }
        let s = self
            .value(input)
            .values()
            .iter()
            .zip(&weights)
            .fold(T::zero(), |acc, (&v, &w)| acc + v * w);
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { input, weights }, &[input])
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err(
                "mse",
                "shape",
                format!("prediction {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let diff: Vec<T> = self
            .value(pred)
            .values()
            .iter()
            .zip(target.values())
            .map(|(&p, &t)| p - t)
            .collect();
        let sq: f64 = diff.iter().map(|d| d.to_f64() * d.to_f64()).sum();
        let loss = T::lit(sq / diff.len() as f64);
        self.push("mse", Tensor::scalar(loss), Op::Mse { pred, diff }, &[pred])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let [n, k] = rank2(OP, self.value(logits))?;
        if labels.len() != n {
            return Err(shape_err(OP, "batch", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(EngineError::Param(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).values();
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label].to_f64();
            for (j, &v) in row.iter().enumerate() {
                probs[r * k + j] = T::lit((v.to_f64() - lse).exp());
            }
        }
        let loss = T::lit(total / n as f64);
        self.push(
            OP,
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match node.value.grad() {
            None => node.value.set_grad(Some(g)).expect("gradient length"),
            Some(_) => add_into(node.value.grad_mut(), &g),
        }
    }

    /// Reverse-mode pass from a scalar `loss`. Gradients land on every leaf
    /// created with [`Graph::param`] that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(EngineError::Contract(
                "backward already ran on this graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(EngineError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(Some(vec![T::one()]))?;
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(op, &gy)?;
        }
        Ok(())
    }

    fn backprop(&mut self, op: Op<T>, gy: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                filters,
            } => {
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img = geom.image_len();
                let want_x = self.needs(input);
                let want_w = self.needs(weight);
                let mut dx = if want_x { vec![T::zero(); batch * img] } else { Vec::new() };
                let mut dw = vec![T::zero(); filters * rows];
                let mut col = vec![T::zero(); rows * cols];
                {
                    let x = self.value(input).values();
                    let wv = self.value(weight).values();
                    for s in 0..batch {
                        let g = &gy[s * filters * cols..(s + 1) * filters * cols];
                        if want_w {
                            im2col(&x[s * img..(s + 1) * img], &geom, &mut col);
                            T::gemm(filters, cols, rows, T::one(), g, false, &col, true, T::one(), &mut dw);
                        }
                        if want_x {
                            T::gemm(rows, filters, cols, T::one(), wv, true, g, false, T::zero(), &mut col);
                            col2im(&col, &geom, &mut dx[s * img..(s + 1) * img]);
                        }
                    }
                }
                if let Some(b) = bias {
                    let db = plane_sums(gy, batch, filters, cols);
                    self.accumulate(b, db);
                }
                if want_w {
                    self.accumulate(weight, dw);
                }
                if want_x {
                    self.accumulate(input, dx);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                batch,
                filters,
            } => {
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img = geom.image_len();
                let want_x = self.needs(input);
                let want_w = self.needs(weight);
                let mut dx = if want_x { vec![T::zero(); batch * filters * cols] } else { Vec::new() };
                let mut dw = vec![T::zero(); filters * rows];
                let mut col = vec![T::zero(); rows * cols];
                {
                    let x = self.value(input).values();
                    let wv = self.value(weight).values();
                    for s in 0..batch {
                        im2col(&gy[s * img..(s + 1) * img], &geom, &mut col);
                        if want_x {
                            let d = &mut dx[s * filters * cols..(s + 1) * filters * cols];
                            T::gemm(filters, rows, cols, T::one(), wv, false, &col, false, T::zero(), d);
                        }
                        if want_w {
                            let xs = &x[s * filters * cols..(s + 1) * filters * cols];
                            T::gemm(filters, cols, rows, T::one(), xs, false, &col, true, T::one(), &mut dw);
                        }
                    }
                }
                if let Some(b) = bias {
                    let db = plane_sums(gy, batch, geom.channels, geom.image_h * geom.image_w);
                    self.accumulate(b, db);
                }
                if want_w {
                    self.accumulate(weight, dw);
                }
                if want_x {
                    self.accumulate(input, dx);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = rank4("batchnorm2d", self.value(input))?;
                let plane = h * w;
                let count = (n * plane) as f64;
                let g = self.value(gamma).values().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gy.len()];
                for ch in 0..c {
                    let (mut sdy, mut sdyx) = (0.0, 0.0);
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            sdy += gy[i].to_f64();
                            sdyx += gy[i].to_f64() * xhat[i].to_f64();
                        }
                    }
                    dgamma[ch] = T::lit(sdyx);
                    dbeta[ch] = T::lit(sdy);
                    let k = g[ch] * inv_std[ch];
                    if train {
                        let mean_dy = T::lit(sdy / count);
                        let mean_dyx = T::lit(sdyx / count);
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = k * (gy[i] - mean_dy - xhat[i] * mean_dyx);
                            }
                        }
                    } else {
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = k * gy[i];
                            }
                        }
                    }
                }
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
                self.accumulate(input, dx);
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(input).values();
                let dx = x
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v >= T::zero() { g } else { slope * g })
                    .collect();
                self.accumulate(input, dx);
            }
            Op::Mfm {
                input,
                first_won,
                half,
                inner,
            } => {
                let mut dx = vec![T::zero(); self.value(input).len()];
                let block = half * inner;
                for (o, (&g, &first)) in gy.iter().zip(&first_won).enumerate() {
                    let (s, r) = (o / block, o % block);
                    let idx = s * 2 * block + if first { r } else { block + r };
                    dx[idx] = g;
                }
                self.accumulate(input, dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(input).len()];
                for (&g, &idx) in gy.iter().zip(&argmax) {
                    dx[idx as usize] += g;
                }
                self.accumulate(input, dx);
            }
            Op::Affine { input, weight, bias } => {
                let [n, d] = rank2("affine", self.value(input))?;
                let m = self.shape(weight)[1];
                let mut db = vec![T::zero(); m];
                for row in gy.chunks(m) {
                    add_into(&mut db, row);
                }
                if self.needs(weight) {
                    let mut dw = vec![T::zero(); d * m];
                    let x = self.value(input).values();
                    T::gemm(d, n, m, T::one(), x, true, gy, false, T::zero(), &mut dw);
                    self.accumulate(weight, dw);
                }
                if self.needs(input) {
                    let mut dx = vec![T::zero(); n * d];
                    let wv = self.value(weight).values();
                    T::gemm(n, m, d, T::one(), gy, false, wv, true, T::zero(), &mut dx);
                    self.accumulate(input, dx);
                }
                self.accumulate(bias, db);
            }
            Op::Dropout { input, mask } => {
                let dx = gy.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(input, dx);
            }
            Op::Identity { input } => self.accumulate(input, gy.to_vec()),
            Op::PadHw {
                input,
                from,
                padded: (nh, nw),
            } => {
                let [n, c, h, w] = from;
                let mut dx = Vec::with_capacity(n * c * h * w);
                for p in 0..n * c {
                    for i in 0..h {
                        dx.extend_from_slice(&gy[(p * nh + i) * nw..(p * nh + i) * nw + w]);
                    }
                }
                self.accumulate(input, dx);
            }
            Op::CropHw {
                input,
                from,
                kept: (h, w),
            } => {
                let [n, c, ih, iw] = from;
                let mut dx = vec![T::zero(); n * c * ih * iw];
                for p in 0..n * c {
                    for i in 0..h {
                        let src = &gy[(p * h + i) * w..(p * h + i + 1) * w];
                        dx[(p * ih + i) * iw..(p * ih + i) * iw + w].copy_from_slice(src);
                    }
                }
                self.accumulate(input, dx);
            }
            Op::Sum { input } => {
                let n = self.value(input).len();
                self.accumulate(input, vec![gy[0]; n]);
            }
            Op::WeightedSum { input, weights } => {
                let dx = weights.iter().map(|&w| w * gy[0]).collect();
                self.accumulate(input, dx);
            }
            Op::Mse { pred, diff } => {
                let k = T::lit(2.0 / diff.len() as f64) * gy[0];
                let dx = diff.iter().map(|&d| d * k).collect();
                self.accumulate(pred, dx);
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gy[0] / T::lit(n as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= scale;
                }
                self.accumulate(logits, dx);
            }
        }
        Ok(())
    }
}

fn plane_sums<T: Scalar>(gy: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for s in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (s * channels + c) * plane;
            let sum: f64 = gy[base..base + plane].iter().map(|v| v.to_f64()).sum();
            *o += T::lit(sum);
        }
    }
    out
}
