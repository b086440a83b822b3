//! Declarative layer descriptions and a sequential executor over them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, EngineError, Result};
use crate::graph::{BatchNormState, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Batchnorm2d {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    Mfm,
    Maxpool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Affine {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        p: f64,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    pub fn deconv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::ConvTranspose2d {
            in_channels,
            out_channels,
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::Batchnorm2d {
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn maxpool(size: usize) -> Self {
        LayerSpec::Maxpool2d {
            kernel: [size; 2],
            stride: [size; 2],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerSpec::Batchnorm2d { .. } => "batchnorm2d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Relu => "relu",
            LayerSpec::Mfm => "mfm",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    /// Hyperparameter checks that do not depend on the input shape.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EngineError::Param(format!("{}: {msg}", self.kind())));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("channel counts must be >= 1".into());
                }
                if kernel.contains(&0) {
                    return bad(format!("kernel {kernel:?} must be >= 1"));
                }
                if stride.contains(&0) {
                    return bad(format!("stride {stride:?} must be >= 1"));
                }
            }
            LayerSpec::Batchnorm2d {
                channels,
                momentum,
                eps,
            } => {
                if channels == 0 {
                    return bad("channels must be >= 1".into());
                }
                if !(momentum > 0.0 && momentum <= 1.0) {
                    return bad(format!("momentum {momentum} outside (0, 1]"));
                }
                if eps.is_nan() || eps < 0.0 {
                    return bad(format!("eps {eps} must be >= 0"));
                }
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(0.0..1.0).contains(&slope) {
                    return bad(format!("slope {slope} outside [0, 1)"));
                }
            }
            LayerSpec::Maxpool2d { kernel, stride } => {
                if kernel.contains(&0) || stride.contains(&0) {
                    return bad("kernel and stride must be >= 1".into());
                }
            }
            LayerSpec::Affine {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad("feature counts must be >= 1".into());
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("drop probability {p} outside [0, 1)"));
                }
            }
            LayerSpec::Relu | LayerSpec::Mfm => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, without computing anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let op = self.kind();
        let need4 = || -> Result<[usize; 4]> {
            match *input {
                [n, c, h, w] => Ok([n, c, h, w]),
                _ => Err(shape_err(op, "rank", format!("expected [N,C,H,W], got {input:?}"))),
            }
        };
        let channel_check = |have: usize, want: usize| -> Result<()> {
            if have != want {
                return Err(shape_err(
                    op,
                    "channel",
                    format!("input has {have} channels, layer expects {want}"),
                ));
            }
            Ok(())
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [n, c, h, w] = need4()?;
                channel_check(c, in_channels)?;
                let g = crate::conv::ConvGeom::forward(
                    "conv2d",
                    c,
                    (h, w),
                    (kernel[0], kernel[1]),
                    (stride[0], stride[1]),
                    (padding[0], padding[1]),
                )?;
                Ok(vec![n, out_channels, g.col_h, g.col_w])
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [n, c, h, w] = need4()?;
                channel_check(c, in_channels)?;
                let g = crate::conv::ConvGeom::transposed(
                    "conv_transpose2d",
                    out_channels,
                    (h, w),
                    (kernel[0], kernel[1]),
                    (stride[0], stride[1]),
                    (padding[0], padding[1]),
                )?;
                Ok(vec![n, out_channels, g.image_h, g.image_w])
            }
            LayerSpec::Batchnorm2d { channels, .. } => {
                let [_, c, _, _] = need4()?;
                channel_check(c, channels)?;
                Ok(input.to_vec())
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Mfm => {
                if input.len() != 2 && input.len() != 4 {
                    return Err(shape_err(op, "rank", format!("expected rank 2 or 4, got {input:?}")));
                }
                if input[1] % 2 != 0 {
                    return Err(shape_err(
                        op,
                        "channel",
                        format!("mfm needs an even channel count, got {}", input[1]),
                    ));
                }
                let mut out = input.to_vec();
                out[1] /= 2;
                Ok(out)
            }
            LayerSpec::Maxpool2d { kernel, stride } => {
                let [n, c, h, w] = need4()?;
                if kernel[0] > h {
                    return Err(shape_err(op, "height", format!("kernel {} > input {h}", kernel[0])));
                }
                if kernel[1] > w {
                    return Err(shape_err(op, "width", format!("kernel {} > input {w}", kernel[1])));
                }
                Ok(vec![n, c, (h - kernel[0]) / stride[0] + 1, (w - kernel[1]) / stride[1] + 1])
            }
            LayerSpec::Affine {
                in_features,
                out_features,
            } => match *input {
                [n, d] if d == in_features => Ok(vec![n, out_features]),
                [_, d] => Err(shape_err(
                    op,
                    "inner",
                    format!("input width {d}, layer expects {in_features}"),
                )),
                _ => Err(shape_err(op, "rank", format!("expected [N,D], got {input:?}"))),
            },
        }
    }
}

/// Ordered collection of named tensors (parameters or buffers).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index_of(&name) {
            Some(i) => self.entries[i].1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.sum_squares()).sum()
    }

    /// Register every tensor as a trainable leaf; the returned vars line up
    /// with the set's order.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Vec<Var>> {
        self.entries.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Like [`ParamSet::bind`] but as constants, for inference.
    pub fn bind_constants(&self, g: &mut Graph<T>) -> Result<Vec<Var>> {
        self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    /// Gradients for bound vars, zero-filled where nothing flowed.
    pub fn collect_grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }
}

/// Runtime context for one forward pass through a [`Sequential`].
pub struct Forward<'a, T: Scalar, R: Rng + ?Sized> {
    pub params: &'a ParamSet<T>,
    pub vars: &'a [Var],
    pub buffers: &'a mut ParamSet<T>,
    pub train: bool,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Forward<'_, T, R> {
    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| EngineError::Contract(format!("missing parameter {name}")))
    }
}

/// A stack of [`LayerSpec`]s whose parameters are named `{prefix}.{index}.{field}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    prefix: String,
    layers: Vec<LayerSpec>,
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: f64, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1.0)).sqrt();
    let count: usize = shape.iter().product();
    let values = (0..count).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, values).expect("init shape")
}

impl Sequential {
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Sequential {
            prefix: prefix.into(),
            layers,
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn name(&self, idx: usize, field: &str) -> String {
        format!("{}.{idx}.{field}", self.prefix)
    }

    /// Shapes after every layer, starting with the input shape itself.
    pub fn trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// He-uniform weights, zero biases, unit/zero batch-norm affine terms,
    /// and fresh running statistics.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamSet<T>, buffers: &mut ParamSet<T>) {
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = (in_channels * kernel[0] * kernel[1]) as f64;
                    let shape = vec![out_channels, in_channels, kernel[0], kernel[1]];
                    params.insert(self.name(i, "weight"), he_uniform(shape, fan_in, rng));
                    params.insert(self.name(i, "bias"), Tensor::zeros(vec![out_channels]));
                }
                LayerSpec::ConvTranspose2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    // each output position sees roughly kernel/stride taps per input channel
                    let taps = (kernel[0] * kernel[1]) as f64 / (stride[0] * stride[1]) as f64;
                    let fan_in = in_channels as f64 * taps.max(1.0);
                    let shape = vec![in_channels, out_channels, kernel[0], kernel[1]];
                    params.insert(self.name(i, "weight"), he_uniform(shape, fan_in, rng));
                    params.insert(self.name(i, "bias"), Tensor::zeros(vec![out_channels]));
                }
                LayerSpec::Batchnorm2d { channels, .. } => {
                    params.insert(self.name(i, "gamma"), Tensor::full(vec![channels], T::one()));
                    params.insert(self.name(i, "beta"), Tensor::zeros(vec![channels]));
                    buffers.insert(self.name(i, "running_mean"), Tensor::zeros(vec![channels]));
                    buffers.insert(self.name(i, "running_var"), Tensor::full(vec![channels], T::one()));
                }
                LayerSpec::Affine {
                    in_features,
                    out_features,
                } => {
                    let shape = vec![in_features, out_features];
                    params.insert(self.name(i, "weight"), he_uniform(shape, in_features as f64, rng));
                    params.insert(self.name(i, "bias"), Tensor::zeros(vec![out_features]));
                }
                LayerSpec::LeakyRelu { .. }
                | LayerSpec::Relu
                | LayerSpec::Mfm
                | LayerSpec::Maxpool2d { .. }
                | LayerSpec::Dropout { .. } => {}
            }
        }
    }

    /// Names and shapes of every parameter and buffer this stack expects.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((self.name(i, "weight"), vec![out_channels, in_channels, kernel[0], kernel[1]]));
                    out.push((self.name(i, "bias"), vec![out_channels]));
                }
                LayerSpec::ConvTranspose2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((self.name(i, "weight"), vec![in_channels, out_channels, kernel[0], kernel[1]]));
                    out.push((self.name(i, "bias"), vec![out_channels]));
                }
                LayerSpec::Batchnorm2d { channels, .. } => {
                    for field in ["gamma", "beta", "running_mean", "running_var"] {
                        out.push((self.name(i, field), vec![channels]));
                    }
                }
                LayerSpec::Affine {
                    in_features,
                    out_features,
                } => {
                    out.push((self.name(i, "weight"), vec![in_features, out_features]));
                    out.push((self.name(i, "bias"), vec![out_features]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        ctx: &mut Forward<'_, T, R>,
    ) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let w = ctx.var(&self.name(i, "weight"))?;
                    let b = ctx.var(&self.name(i, "bias"))?;
                    g.conv2d(x, w, Some(b), (stride[0], stride[1]), (padding[0], padding[1]))?
                }
                LayerSpec::ConvTranspose2d { stride, padding, .. } => {
                    let w = ctx.var(&self.name(i, "weight"))?;
                    let b = ctx.var(&self.name(i, "bias"))?;
                    g.conv_transpose2d(x, w, Some(b), (stride[0], stride[1]), (padding[0], padding[1]))?
                }
                LayerSpec::Batchnorm2d { momentum, eps, .. } => {
                    let gamma = ctx.var(&self.name(i, "gamma"))?;
                    let beta = ctx.var(&self.name(i, "beta"))?;
                    let mean_name = self.name(i, "running_mean");
                    let var_name = self.name(i, "running_var");
                    let mut state = BatchNormState {
                        running_mean: buffer(ctx.buffers, &mean_name)?,
                        running_var: buffer(ctx.buffers, &var_name)?,
                    };
                    let y = g.batchnorm2d(x, gamma, beta, &mut state, ctx.train, momentum, eps)?;
                    if ctx.train {
                        store(ctx.buffers, &mean_name, state.running_mean)?;
                        store(ctx.buffers, &var_name, state.running_var)?;
                    }
                    y
                }
                LayerSpec::LeakyRelu { slope } => g.leaky_relu(x, slope)?,
                LayerSpec::Relu => g.relu(x)?,
                LayerSpec::Mfm => g.mfm(x)?,
                LayerSpec::Maxpool2d { kernel, stride } => {
                    g.maxpool2d(x, (kernel[0], kernel[1]), (stride[0], stride[1]))?
                }
                LayerSpec::Affine { .. } => {
                    let w = ctx.var(&self.name(i, "weight"))?;
                    let b = ctx.var(&self.name(i, "bias"))?;
                    g.affine(x, w, b)?
                }
                LayerSpec::Dropout { p } => g.dropout(x, p, ctx.train, ctx.rng)?,
            };
        }
        Ok(x)
    }
}

fn buffer<T: Scalar>(buffers: &ParamSet<T>, name: &str) -> Result<Vec<T>> {
    buffers
        .get(name)
        .map(|t| t.values().to_vec())
        .ok_or_else(|| EngineError::Contract(format!("missing buffer {name}")))
}

fn store<T: Scalar>(buffers: &mut ParamSet<T>, name: &str, values: Vec<T>) -> Result<()> {
    let t = buffers
        .get_mut(name)
        .ok_or_else(|| EngineError::Contract(format!("missing buffer {name}")))?;
    t.values_mut().copy_from_slice(&values);
    Ok(())
}
