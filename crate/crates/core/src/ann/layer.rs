//! Layer specifications and their batched forward/backward passes.
//!
//! Image activations are `[N, C, H, W]`; flat activations are `[N, F]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{col2im, gemm, im2col, ConvGeom, Strides};
use super::AnnError;
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    AvgPool {
        window: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
    Flatten,
}

/// Per-item activation shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureShape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat(usize),
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            Self::Image {
                channels,
                height,
                width,
            } => channels * height * width,
            Self::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor shape for a batch of `n` items.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            Self::Image {
                channels,
                height,
                width,
            } => vec![n, channels, height, width],
            Self::Flat(f) => vec![n, f],
        }
    }

    fn of_tensor(t: &Tensor) -> Option<Self> {
        match *t.shape() {
            [_, c, h, w] => Some(Self::Image {
                channels: c,
                height: h,
                width: w,
            }),
            [_, f] => Some(Self::Flat(f)),
            _ => None,
        }
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv2d { .. } => "conv2d",
            Self::Dense { .. } => "dense",
            Self::Relu => "relu",
            Self::MaxPool { .. } => "max_pool",
            Self::AvgPool { .. } => "avg_pool",
            Self::BatchNorm { .. } => "batch_norm",
            Self::Dropout { .. } => "dropout",
            Self::Softmax => "softmax",
            Self::Flatten => "flatten",
        }
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, Self::MaxPool { .. } | Self::AvgPool { .. })
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            Self::Conv2d { .. } | Self::Dense { .. } | Self::BatchNorm { .. }
        )
    }

    /// Check the kind-specific parameters and compute the output shape.
    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape, AnnError> {
        let mismatch = || AnnError::ShapeMismatch {
            layer: self.name(),
            detail: format!("input {input:?}"),
        };
        let invalid = |detail: &str| AnnError::InvalidLayer {
            layer: self.name(),
            detail: detail.to_string(),
        };
        match *self {
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(invalid("sizes must be positive"));
                }
                let FeatureShape::Image {
                    channels,
                    height,
                    width,
                } = input
                else {
                    return Err(mismatch());
                };
                if channels != in_channels
                    || height + 2 * padding < kernel
                    || width + 2 * padding < kernel
                {
                    return Err(mismatch());
                }
                let g = ConvGeom {
                    channels,
                    height,
                    width,
                    kernel,
                    stride,
                    padding,
                };
                Ok(FeatureShape::Image {
                    channels: out_channels,
                    height: g.out_height(),
                    width: g.out_width(),
                })
            }
            Self::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(invalid("sizes must be positive"));
                }
                match input {
                    FeatureShape::Flat(n) if n == inputs => Ok(FeatureShape::Flat(outputs)),
                    _ => Err(mismatch()),
                }
            }
            Self::MaxPool { window } | Self::AvgPool { window } => {
                if window == 0 {
                    return Err(invalid("window must be positive"));
                }
                match input {
                    FeatureShape::Image {
                        channels,
                        height,
                        width,
                    } if height >= window && width >= window => Ok(FeatureShape::Image {
                        channels,
                        height: height / window,
                        width: width / window,
                    }),
                    _ => Err(mismatch()),
                }
            }
            Self::BatchNorm { channels } => {
                let c = match input {
                    FeatureShape::Image { channels, .. } => channels,
                    FeatureShape::Flat(n) => n,
                };
                if c != channels {
                    return Err(mismatch());
                }
                Ok(input)
            }
            Self::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(invalid("dropout rate must lie in [0, 1)"));
                }
                Ok(input)
            }
            Self::Relu | Self::Softmax => Ok(input),
            Self::Flatten => Ok(FeatureShape::Flat(input.len())),
        }
    }
}

/// Learned state of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    None,
    /// Conv2d weights are `[out, in, k, k]`, dense weights `[out, in]`.
    Affine {
        weight: Tensor,
        bias: Tensor,
    },
    Norm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
}

impl LayerParams {
    /// Trainable tensors in a fixed order (weight, bias) or (gamma, beta).
    pub fn trainable(&self) -> Vec<&Tensor> {
        match self {
            Self::None => vec![],
            Self::Affine { weight, bias } => vec![weight, bias],
            Self::Norm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::None => vec![],
            Self::Affine { weight, bias } => vec![weight, bias],
            Self::Norm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    /// Every stored tensor, with a stable name, in persistence order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::None => vec![],
            Self::Affine { weight, bias } => vec![("weight", weight), ("bias", bias)],
            Self::Norm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        }
    }
}

/// Activations saved by a training-mode forward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Conv {
        input_shape: Vec<usize>,
        cols: Vec<f64>,
    },
    Dense {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    BatchNorm {
        normalized: Tensor,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Dropout {
        mask: Vec<f64>,
    },
    Softmax {
        output: Tensor,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: LayerParams) -> Self {
        Self { spec, params }
    }

    /// Layer with He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases,
    /// and identity batch-norm statistics.
    pub fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let he = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::from_parts(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            )
        };
        let params = match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => LayerParams::Affine {
                weight: he(
                    &[out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    rng,
                ),
                bias: Tensor::zeros(&[out_channels]),
            },
            LayerSpec::Dense { inputs, outputs } => LayerParams::Affine {
                weight: he(&[outputs, inputs], inputs, rng),
                bias: Tensor::zeros(&[outputs]),
            },
            LayerSpec::BatchNorm { channels } => LayerParams::Norm {
                gamma: Tensor::filled(&[channels], 1.0),
                beta: Tensor::zeros(&[channels]),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::filled(&[channels], 1.0),
            },
            _ => LayerParams::None,
        };
        Self { spec, params }
    }

    fn check_input(&self, input: &Tensor) -> Result<FeatureShape, AnnError> {
        let shape = FeatureShape::of_tensor(input).ok_or_else(|| AnnError::ShapeMismatch {
            layer: self.spec.name(),
            detail: format!("tensor rank {}", input.shape().len()),
        })?;
        self.spec.output_shape(shape)?;
        Ok(shape)
    }

    /// Inference-mode forward pass: dropout is the identity and batch norm
    /// uses its running statistics.
    pub fn forward_infer(&self, input: &Tensor) -> Result<Tensor, AnnError> {
        let shape = self.check_input(input)?;
        Ok(match (&self.spec, &self.params) {
            (
                LayerSpec::BatchNorm { .. },
                LayerParams::Norm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let scale: Vec<f64> = gamma
                    .data()
                    .iter()
                    .zip(running_var.data())
                    .map(|(g, v)| g / (v + BATCH_NORM_EPS).sqrt())
                    .collect();
                let shift: Vec<f64> = beta
                    .data()
                    .iter()
                    .zip(running_mean.data())
                    .zip(&scale)
                    .map(|((b, m), s)| b - m * s)
                    .collect();
                channel_affine(input, shape, &scale, &shift)
            }
            (LayerSpec::Dropout { .. }, _) => input.clone(),
            _ => self.forward_common(input, shape)?.0,
        })
    }

    /// Training-mode forward pass returning the cache needed by `backward`.
    pub fn forward_train(
        &self,
        input: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Cache), AnnError> {
        let shape = self.check_input(input)?;
        match (&self.spec, &self.params) {
            (LayerSpec::BatchNorm { channels }, LayerParams::Norm { gamma, beta, .. }) => {
                Ok(batch_norm_train(input, shape, *channels, gamma, beta))
            }
            (LayerSpec::Dropout { rate }, _) => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..input.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let out = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                Ok((
                    Tensor::from_parts(input.shape().to_vec(), out),
                    Cache::Dropout { mask },
                ))
            }
            _ => self.forward_common(input, shape),
        }
    }

    fn forward_common(
        &self,
        input: &Tensor,
        shape: FeatureShape,
    ) -> Result<(Tensor, Cache), AnnError> {
        let n = input.batch();
        match (&self.spec, &self.params) {
            (
                &LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerParams::Affine { weight, bias },
            ) => {
                let FeatureShape::Image {
                    channels,
                    height,
                    width,
                } = shape
                else {
                    unreachable!()
                };
                let g = ConvGeom {
                    channels,
                    height,
                    width,
                    kernel,
                    stride,
                    padding,
                };
                let (p, k) = (g.positions(), g.patch());
                let in_per = channels * height * width;
                let mut cols = vec![0.0; n * k * p];
                let mut out = vec![0.0; n * out_channels * p];
                for i in 0..n {
                    let c = &mut cols[i * k * p..(i + 1) * k * p];
                    im2col(&input.data()[i * in_per..(i + 1) * in_per], g, c);
                    let y = &mut out[i * out_channels * p..(i + 1) * out_channels * p];
                    for (o, row) in y.chunks_exact_mut(p).enumerate() {
                        row.fill(bias.data()[o]);
                    }
                    gemm(
                        out_channels,
                        k,
                        p,
                        1.0,
                        weight.data(),
                        Strides::row_major(k),
                        c,
                        Strides::row_major(p),
                        1.0,
                        y,
                        Strides::row_major(p),
                    );
                }
                let t =
                    Tensor::from_parts(vec![n, out_channels, g.out_height(), g.out_width()], out);
                Ok((
                    t,
                    Cache::Conv {
                        input_shape: input.shape().to_vec(),
                        cols,
                    },
                ))
            }
            (&LayerSpec::Dense { inputs, outputs }, LayerParams::Affine { weight, bias }) => {
                let mut out = Vec::with_capacity(n * outputs);
                for _ in 0..n {
                    out.extend_from_slice(bias.data());
                }
                gemm(
                    n,
                    inputs,
                    outputs,
                    1.0,
                    input.data(),
                    Strides::row_major(inputs),
                    weight.data(),
                    Strides::transposed(inputs),
                    1.0,
                    &mut out,
                    Strides::row_major(outputs),
                );
                Ok((
                    Tensor::from_parts(vec![n, outputs], out),
                    Cache::Dense {
                        input: input.clone(),
                    },
                ))
            }
            (LayerSpec::Relu, _) => {
                let out = input.data().iter().map(|&x| x.max(0.0)).collect();
                Ok((
                    Tensor::from_parts(input.shape().to_vec(), out),
                    Cache::Relu {
                        input: input.clone(),
                    },
                ))
            }
            (&LayerSpec::MaxPool { window }, _) | (&LayerSpec::AvgPool { window }, _) => {
                let is_max = matches!(self.spec, LayerSpec::MaxPool { .. });
                let FeatureShape::Image {
                    channels,
                    height,
                    width,
                } = shape
                else {
                    unreachable!()
                };
                let (oh, ow) = (height / window, width / window);
                let mut out = Vec::with_capacity(n * channels * oh * ow);
                let mut argmax = Vec::new();
                let norm = 1.0 / (window * window) as f64;
                for plane in 0..n * channels {
                    let base = plane * height * width;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            let mut sum = 0.0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let idx = base + (oy * window + dy) * width + ox * window + dx;
                                    let v = input.data()[idx];
                                    sum += v;
                                    if v > best.0 {
                                        best = (v, idx);
                                    }
                                }
                            }
                            if is_max {
                                out.push(best.0);
                                argmax.push(best.1);
                            } else {
                                out.push(sum * norm);
                            }
                        }
                    }
                }
                let t = Tensor::from_parts(vec![n, channels, oh, ow], out);
                let input_shape = input.shape().to_vec();
                let cache = if is_max {
                    Cache::MaxPool {
                        input_shape,
                        argmax,
                    }
                } else {
                    Cache::AvgPool { input_shape }
                };
                Ok((t, cache))
            }
            (LayerSpec::Softmax, _) => {
                let width = shape.len();
                let mut out = input.data().to_vec();
                for row in out.chunks_exact_mut(width) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                let t = Tensor::from_parts(input.shape().to_vec(), out);
                Ok((t.clone(), Cache::Softmax { output: t }))
            }
            (LayerSpec::Flatten, _) => {
                let t = Tensor::from_parts(vec![n, shape.len()], input.data().to_vec());
                Ok((
                    t,
                    Cache::Flatten {
                        input_shape: input.shape().to_vec(),
                    },
                ))
            }
            (spec, _) => Err(AnnError::MissingParams { layer: spec.name() }),
        }
    }

    /// Propagate `grad_out` through the layer. Returns the input gradient and
    /// the gradients of the trainable tensors, in `LayerParams::trainable`
    /// order.
    pub fn backward(
        &self,
        cache: Option<&Cache>,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>), AnnError> {
        let cache = cache.ok_or(AnnError::MissingCache {
            layer: self.spec.name(),
        })?;
        let g = grad_out.data();
        match (&self.spec, &self.params, cache) {
            (
                &LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerParams::Affine { weight, bias },
                Cache::Conv { input_shape, cols },
            ) => {
                let &[n, channels, height, width] = &input_shape[..] else {
                    unreachable!()
                };
                let geom = ConvGeom {
                    channels,
                    height,
                    width,
                    kernel,
                    stride,
                    padding,
                };
                let (p, k) = (geom.positions(), geom.patch());
                self.expect_grad(
                    grad_out,
                    &[n, out_channels, geom.out_height(), geom.out_width()],
                )?;
                let in_per = channels * height * width;
                let mut dw = vec![0.0; weight.len()];
                let mut db = vec![0.0; bias.len()];
                let mut dx = vec![0.0; n * in_per];
                let mut dcols = vec![0.0; k * p];
                for i in 0..n {
                    let gy = &g[i * out_channels * p..(i + 1) * out_channels * p];
                    let c = &cols[i * k * p..(i + 1) * k * p];
                    for (o, row) in gy.chunks_exact(p).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                    gemm(
                        out_channels,
                        p,
                        k,
                        1.0,
                        gy,
                        Strides::row_major(p),
                        c,
                        Strides::transposed(p),
                        1.0,
                        &mut dw,
                        Strides::row_major(k),
                    );
                    gemm(
                        k,
                        out_channels,
                        p,
                        1.0,
                        weight.data(),
                        Strides::transposed(k),
                        gy,
                        Strides::row_major(p),
                        0.0,
                        &mut dcols,
                        Strides::row_major(p),
                    );
                    col2im(&dcols, geom, &mut dx[i * in_per..(i + 1) * in_per]);
                }
                Ok((
                    Tensor::from_parts(input_shape.clone(), dx),
                    vec![
                        Tensor::from_parts(weight.shape().to_vec(), dw),
                        Tensor::from_parts(bias.shape().to_vec(), db),
                    ],
                ))
            }
            (
                &LayerSpec::Dense { inputs, outputs },
                LayerParams::Affine { weight, bias },
                Cache::Dense { input },
            ) => {
                let n = input.batch();
                self.expect_grad(grad_out, &[n, outputs])?;
                let mut dw = vec![0.0; outputs * inputs];
                gemm(
                    outputs,
                    n,
                    inputs,
                    1.0,
                    g,
                    Strides::transposed(outputs),
                    input.data(),
                    Strides::row_major(inputs),
                    0.0,
                    &mut dw,
                    Strides::row_major(inputs),
                );
                let mut db = vec![0.0; outputs];
                for row in g.chunks_exact(outputs) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                let mut dx = vec![0.0; n * inputs];
                gemm(
                    n,
                    outputs,
                    inputs,
                    1.0,
                    g,
                    Strides::row_major(outputs),
                    weight.data(),
                    Strides::row_major(inputs),
                    0.0,
                    &mut dx,
                    Strides::row_major(inputs),
                );
                Ok((
                    Tensor::from_parts(input.shape().to_vec(), dx),
                    vec![
                        Tensor::from_parts(weight.shape().to_vec(), dw),
                        Tensor::from_parts(bias.shape().to_vec(), db),
                    ],
                ))
            }
            (LayerSpec::Relu, _, Cache::Relu { input }) => {
                self.expect_grad(grad_out, input.shape())?;
                let dx = input
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                Ok((Tensor::from_parts(input.shape().to_vec(), dx), vec![]))
            }
            (
                LayerSpec::MaxPool { .. },
                _,
                Cache::MaxPool {
                    input_shape,
                    argmax,
                },
            ) => {
                if g.len() != argmax.len() {
                    return Err(self.grad_mismatch(grad_out));
                }
                let mut dx = vec![0.0; input_shape.iter().product()];
                for (&idx, &d) in argmax.iter().zip(g) {
                    dx[idx] += d;
                }
                Ok((Tensor::from_parts(input_shape.clone(), dx), vec![]))
            }
            (&LayerSpec::AvgPool { window }, _, Cache::AvgPool { input_shape }) => {
                let &[n, c, h, w] = &input_shape[..] else {
                    unreachable!()
                };
                let (oh, ow) = (h / window, w / window);
                self.expect_grad(grad_out, &[n, c, oh, ow])?;
                let norm = 1.0 / (window * window) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = g[(plane * oh + oy) * ow + ox] * norm;
                            for dy in 0..window {
                                for dxi in 0..window {
                                    dx[plane * h * w
                                        + (oy * window + dy) * w
                                        + ox * window
                                        + dxi] = d;
                                }
                            }
                        }
                    }
                }
                Ok((Tensor::from_parts(input_shape.clone(), dx), vec![]))
            }
            (
                LayerSpec::BatchNorm { channels },
                LayerParams::Norm { gamma, .. },
                Cache::BatchNorm {
                    normalized,
                    inv_std,
                    ..
                },
            ) => {
                self.expect_grad(grad_out, normalized.shape())?;
                Ok(batch_norm_backward(
                    grad_out, normalized, inv_std, gamma, *channels,
                ))
            }
            (LayerSpec::Dropout { .. }, _, Cache::Dropout { mask }) => {
                if g.len() != mask.len() {
                    return Err(self.grad_mismatch(grad_out));
                }
                let dx = g.iter().zip(mask).map(|(d, m)| d * m).collect();
                Ok((Tensor::from_parts(grad_out.shape().to_vec(), dx), vec![]))
            }
            (LayerSpec::Softmax, _, Cache::Softmax { output }) => {
                self.expect_grad(grad_out, output.shape())?;
                let width = output.shape()[1..].iter().product();
                let mut dx = Vec::with_capacity(g.len());
                for (y, d) in output.data().chunks_exact(width).zip(g.chunks_exact(width)) {
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(d).map(|(yi, di)| yi * (di - dot)));
                }
                Ok((Tensor::from_parts(output.shape().to_vec(), dx), vec![]))
            }
            (LayerSpec::Flatten, _, Cache::Flatten { input_shape }) => {
                if g.len() != input_shape.iter().product::<usize>() {
                    return Err(self.grad_mismatch(grad_out));
                }
                Ok((Tensor::from_parts(input_shape.clone(), g.to_vec()), vec![]))
            }
            _ => Err(AnnError::MissingCache {
                layer: self.spec.name(),
            }),
        }
    }

    /// Fold the batch statistics of a training pass into the running
    /// averages. No-op for other layers.
    pub fn absorb_batch_stats(&mut self, cache: &Cache) {
        if let (
            LayerParams::Norm {
                running_mean,
                running_var,
                ..
            },
            Cache::BatchNorm {
                batch_mean,
                batch_var,
                ..
            },
        ) = (&mut self.params, cache)
        {
            for (r, b) in running_mean.data_mut().iter_mut().zip(batch_mean) {
                *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
            }
            for (r, b) in running_var.data_mut().iter_mut().zip(batch_var) {
                *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
            }
        }
    }

    fn expect_grad(&self, grad: &Tensor, shape: &[usize]) -> Result<(), AnnError> {
        if grad.shape() == shape {
            Ok(())
        } else {
            Err(self.grad_mismatch(grad))
        }
    }

    fn grad_mismatch(&self, grad: &Tensor) -> AnnError {
        AnnError::ShapeMismatch {
            layer: self.spec.name(),
            detail: format!("gradient shape {:?}", grad.shape()),
        }
    }
}

/// `(channels, spatial)`: values are laid out as repeated runs of `spatial`
/// values per channel.
fn channel_layout(shape: FeatureShape) -> (usize, usize) {
    match shape {
        FeatureShape::Image {
            channels,
            height,
            width,
        } => (channels, height * width),
        FeatureShape::Flat(f) => (f, 1),
    }
}

/// Visit every channel run as `(channel, run)`.
fn for_each_run(data: &[f64], channels: usize, spatial: usize, mut f: impl FnMut(usize, &[f64])) {
    for (r, run) in data.chunks_exact(spatial).enumerate() {
        f(r % channels, run);
    }
}

fn channel_affine(input: &Tensor, shape: FeatureShape, scale: &[f64], shift: &[f64]) -> Tensor {
    let (channels, spatial) = channel_layout(shape);
    let mut out = input.data().to_vec();
    for (r, run) in out.chunks_exact_mut(spatial).enumerate() {
        let c = r % channels;
        run.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

fn batch_norm_train(
    input: &Tensor,
    shape: FeatureShape,
    channels: usize,
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Cache) {
    let (_, spatial) = channel_layout(shape);
    let count = (input.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for_each_run(input.data(), channels, spatial, |c, run| {
        mean[c] += run.iter().sum::<f64>()
    });
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for_each_run(input.data(), channels, spatial, |c, run| {
        var[c] += run.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>()
    });
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
        .collect();
    let mut normalized = input.data().to_vec();
    let mut out = vec![0.0; input.len()];
    for (r, (xh, y)) in normalized
        .chunks_exact_mut(spatial)
        .zip(out.chunks_exact_mut(spatial))
        .enumerate()
    {
        let c = r % channels;
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for (x, o) in xh.iter_mut().zip(y.iter_mut()) {
            *x = (*x - mean[c]) * inv_std[c];
            *o = g * *x + b;
        }
    }
    let running_var = if count > 1.0 {
        var.iter().map(|v| v * count / (count - 1.0)).collect()
    } else {
        var.clone()
    };
    (
        Tensor::from_parts(input.shape().to_vec(), out),
        Cache::BatchNorm {
            normalized: Tensor::from_parts(input.shape().to_vec(), normalized),
            inv_std,
            batch_mean: mean,
            batch_var: running_var,
        },
    )
}

fn batch_norm_backward(
    grad_out: &Tensor,
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    channels: usize,
) -> (Tensor, Vec<Tensor>) {
    let shape = FeatureShape::of_tensor(normalized).expect("rank checked on forward");
    let (_, spatial) = channel_layout(shape);
    let count = (normalized.len() / channels) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (r, (d, xh)) in grad_out
        .data()
        .chunks_exact(spatial)
        .zip(normalized.data().chunks_exact(spatial))
        .enumerate()
    {
        let c = r % channels;
        dgamma[c] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        dbeta[c] += d.iter().sum::<f64>();
    }
    let mut dx = vec![0.0; normalized.len()];
    for (r, ((out, d), xh)) in dx
        .chunks_exact_mut(spatial)
        .zip(grad_out.data().chunks_exact(spatial))
        .zip(normalized.data().chunks_exact(spatial))
        .enumerate()
    {
        let c = r % channels;
        let k = gamma.data()[c] * inv_std[c] / count;
        for ((o, di), x) in out.iter_mut().zip(d).zip(xh) {
            *o = k * (count * di - dbeta[c] - x * dgamma[c]);
        }
    }
    (
        Tensor::from_parts(normalized.shape().to_vec(), dx),
        vec![
            Tensor::from_parts(vec![channels], dgamma),
            Tensor::from_parts(vec![channels], dbeta),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn relu_forward_and_backward() {
        let layer = Layer::new(LayerSpec::Relu, LayerParams::None);
        let x = t(&[1, 3], &[-1.5, 0.0, 2.0]);
        let (y, cache) = layer.forward_train(&x, &mut rng()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (dx, _) = layer
            .backward(Some(&cache), &t(&[1, 3], &[5.0, 5.0, 3.0]))
            .unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn avg_pool_mean() {
        let layer = Layer::new(LayerSpec::AvgPool { window: 2 }, LayerParams::None);
        let y = layer
            .forward_infer(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn max_pool_routes_gradient_to_max() {
        let layer = Layer::new(LayerSpec::MaxPool { window: 2 }, LayerParams::None);
        let (y, cache) = layer
            .forward_train(&t(&[1, 1, 2, 2], &[1.0, 7.0, 3.0, 4.0]), &mut rng())
            .unwrap();
        assert_eq!(y.data(), &[7.0]);
        let (dx, _) = layer
            .backward(Some(&cache), &t(&[1, 1, 1, 1], &[2.0]))
            .unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let layer = Layer::new(LayerSpec::Softmax, LayerParams::None);
        let y = layer.forward_infer(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_conv() {
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let layer = Layer::new(
            spec,
            LayerParams::Affine {
                weight: t(&[1, 1, 1, 1], &[1.0]),
                bias: t(&[1], &[0.0]),
            },
        );
        let x: Vec<f64> = (0..25).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = t(&[1, 1, 5, 5], &x);
        assert_eq!(layer.forward_infer(&x).unwrap(), x);
    }

    #[test]
    fn dropout_infer_is_identity() {
        let layer = Layer::new(LayerSpec::Dropout { rate: 0.5 }, LayerParams::None);
        let x = t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        assert_eq!(layer.forward_infer(&x).unwrap(), x);
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let layer = Layer::new(LayerSpec::Dropout { rate: 0.25 }, LayerParams::None);
        let x = Tensor::filled(&[1, 1000], 1.0);
        let (y, _) = layer.forward_train(&x, &mut rng()).unwrap();
        assert!(y
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_reported() {
        let layer = Layer::new(
            LayerSpec::Dense {
                inputs: 4,
                outputs: 2,
            },
            LayerParams::None,
        );
        assert!(matches!(
            layer.forward_infer(&Tensor::zeros(&[1, 3])),
            Err(AnnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_without_cache() {
        let layer = Layer::new(LayerSpec::Relu, LayerParams::None);
        assert!(matches!(
            layer.backward(None, &Tensor::zeros(&[1, 1])),
            Err(AnnError::MissingCache { .. })
        ));
    }

    #[test]
    fn batch_norm_infer_uses_running_stats() {
        let layer = Layer::new(
            LayerSpec::BatchNorm { channels: 2 },
            LayerParams::Norm {
                gamma: t(&[2], &[2.0, 1.0]),
                beta: t(&[2], &[0.5, 0.0]),
                running_mean: t(&[2], &[1.0, 0.0]),
                running_var: t(&[2], &[4.0 - BATCH_NORM_EPS, 1.0 - BATCH_NORM_EPS]),
            },
        );
        let y = layer.forward_infer(&t(&[1, 2], &[3.0, -1.0])).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
        assert!((y.data()[1] + 1.0).abs() < 1e-12);
    }
}
