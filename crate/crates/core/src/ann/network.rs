use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{FeatureShape, Layer, LayerParams, LayerSpec};
use super::train::TrainConfig;
use super::AnnError;
use crate::container;
use crate::dataset::LabeledDataset;
use crate::tensor::{argmax, Tensor};

pub const NETWORK_FORMAT_VERSION: u32 = 1;
const NETWORK_MAGIC: &[u8; 8] = b"SPKCNET\0";
const EVAL_CHUNK: usize = 500;

/// Untrained architecture: input shape, ordered layers and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: FeatureShape,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl NetworkSpec {
    pub fn mnist(layers: Vec<LayerSpec>) -> Self {
        Self {
            input: FeatureShape::Image {
                channels: 1,
                height: 28,
                width: 28,
            },
            layers,
            class_count: 10,
        }
    }

    /// Activation shapes before the first layer and after every layer.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>, AnnError> {
        let mut shapes = vec![self.input];
        for layer in &self.layers {
            let next = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Shape-check the stack and require exactly one softmax, placed last,
    /// whose width equals the class count.
    pub fn validate(&self) -> Result<(), AnnError> {
        let shapes = self.shapes()?;
        let softmaxes = self
            .layers
            .iter()
            .filter(|l| **l == LayerSpec::Softmax)
            .count();
        if softmaxes != 1 || self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(AnnError::InvalidNetwork(
                "expected exactly one softmax, as the final layer".into(),
            ));
        }
        match shapes.last() {
            Some(FeatureShape::Flat(n)) if *n == self.class_count => Ok(()),
            other => Err(AnnError::InvalidNetwork(format!(
                "output shape {other:?} does not match {} classes",
                self.class_count
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggMiniConfig {
    /// Output channels of each conv block.
    pub block_channels: Vec<usize>,
    pub convs_per_block: usize,
    pub hidden: usize,
    pub pool: PoolKind,
    pub batch_norm: bool,
    pub class_count: usize,
}

impl Default for VggMiniConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![16, 32],
            convs_per_block: 1,
            hidden: 128,
            pool: PoolKind::Max,
            batch_norm: true,
            class_count: 10,
        }
    }
}

/// Scaled-down VGG stack for 28×28 single-channel input: conv3×3 blocks
/// (optionally batch-normalized) separated by 2×2 pooling, then one hidden
/// dense layer and the classifier.
pub fn build_vgg_mini(cfg: &VggMiniConfig) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut channels = 1;
    for &out in &cfg.block_channels {
        for _ in 0..cfg.convs_per_block.max(1) {
            layers.push(LayerSpec::Conv2d {
                in_channels: channels,
                out_channels: out,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            if cfg.batch_norm {
                layers.push(LayerSpec::BatchNorm { channels: out });
            }
            layers.push(LayerSpec::Relu);
            channels = out;
        }
        layers.push(match cfg.pool {
            PoolKind::Max => LayerSpec::MaxPool { window: 2 },
            PoolKind::Avg => LayerSpec::AvgPool { window: 2 },
        });
    }
    let side = 28 >> cfg.block_channels.len();
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        inputs: channels * side * side,
        outputs: cfg.hidden,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense {
        inputs: cfg.hidden,
        outputs: cfg.class_count,
    });
    layers.push(LayerSpec::Softmax);
    NetworkSpec {
        class_count: cfg.class_count,
        ..NetworkSpec::mnist(layers)
    }
}

/// Network with learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedNetwork {
    pub input: FeatureShape,
    pub class_count: usize,
    pub layers: Vec<Layer>,
    /// Configuration that produced the weights, when they came from training.
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    format: String,
    spec: NetworkSpec,
    param_kinds: Vec<String>,
    train_config: Option<TrainConfig>,
}

impl TrainedNetwork {
    /// Freshly initialized weights for `spec`, seeded.
    pub fn initialize(spec: &NetworkSpec, seed: u64) -> Result<Self, AnnError> {
        spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            input: spec.input,
            class_count: spec.class_count,
            layers: spec
                .layers
                .iter()
                .map(|l| Layer::init(l.clone(), &mut rng))
                .collect(),
            train_config: None,
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input: self.input,
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
            class_count: self.class_count,
        }
    }

    /// Check shapes and that every parametric layer carries tensors of the
    /// right shape.
    pub fn check(&self) -> Result<(), AnnError> {
        let shapes = self.spec().shapes()?;
        for (layer, input) in self.layers.iter().zip(&shapes) {
            let ok = match (&layer.spec, &layer.params) {
                (
                    &LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    LayerParams::Affine { weight, bias },
                ) => {
                    weight.shape() == [out_channels, in_channels, kernel, kernel]
                        && bias.shape() == [out_channels]
                }
                (&LayerSpec::Dense { inputs, outputs }, LayerParams::Affine { weight, bias }) => {
                    weight.shape() == [outputs, inputs] && bias.shape() == [outputs]
                }
                (
                    &LayerSpec::BatchNorm { channels },
                    LayerParams::Norm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => [gamma, beta, running_mean, running_var]
                    .iter()
                    .all(|t| t.shape() == [channels]),
                (spec, LayerParams::None) => !spec.is_parametric(),
                _ => false,
            };
            if !ok {
                return Err(AnnError::InvalidNetwork(format!(
                    "{} layer with input {input:?} has mismatched parameters",
                    layer.spec.name()
                )));
            }
        }
        Ok(())
    }

    pub fn forward_infer(&self, input: &Tensor) -> Result<Tensor, AnnError> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward_infer(&x)?;
        }
        Ok(x)
    }

    /// Inference pass returning the input followed by every layer's output.
    pub fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>, AnnError> {
        let mut outs = vec![input.clone()];
        for layer in &self.layers {
            let next = layer.forward_infer(outs.last().unwrap())?;
            outs.push(next);
        }
        Ok(outs)
    }

    /// Predicted class for every item in `data`, ties toward the lowest index.
    pub fn predict(&self, data: &LabeledDataset) -> Result<Vec<usize>, AnnError> {
        let mut labels = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
            let out = self.forward_infer(&images_to_tensor(data, &idx, self.input))?;
            let width = out.len() / idx.len();
            labels.extend(out.data().chunks_exact(width).map(argmax));
        }
        Ok(labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = NetworkHeader {
            format: "spikeconv-network".into(),
            spec: self.spec(),
            param_kinds: self
                .layers
                .iter()
                .map(|l| match l.params {
                    LayerParams::None => "none",
                    LayerParams::Affine { .. } => "affine",
                    LayerParams::Norm { .. } => "norm",
                })
                .map(String::from)
                .collect(),
            train_config: self.train_config.clone(),
        };
        let arrays: Vec<(String, &Tensor)> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params
                    .named()
                    .into_iter()
                    .map(move |(n, t)| (format!("layer{i}.{n}"), t))
            })
            .collect();
        container::write(NETWORK_MAGIC, NETWORK_FORMAT_VERSION, &header, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AnnError> {
        let (header, arrays): (NetworkHeader, _) = container::read(
            bytes,
            NETWORK_MAGIC,
            "spikeconv network",
            NETWORK_FORMAT_VERSION,
        )?;
        if header.param_kinds.len() != header.spec.layers.len() {
            return Err(AnnError::InvalidNetwork(
                "parameter table length differs from layer count".into(),
            ));
        }
        let mut arrays = arrays.into_iter().map(|(_, t)| t);
        let mut take = || {
            arrays
                .next()
                .ok_or_else(|| AnnError::InvalidNetwork("missing parameter array".into()))
        };
        let mut layers = Vec::with_capacity(header.spec.layers.len());
        for (spec, kind) in header.spec.layers.iter().zip(&header.param_kinds) {
            let params = match kind.as_str() {
                "none" => LayerParams::None,
                "affine" => LayerParams::Affine {
                    weight: take()?,
                    bias: take()?,
                },
                "norm" => LayerParams::Norm {
                    gamma: take()?,
                    beta: take()?,
                    running_mean: take()?,
                    running_var: take()?,
                },
                other => {
                    return Err(AnnError::InvalidNetwork(format!(
                        "unknown parameter kind {other:?}"
                    )))
                }
            };
            layers.push(Layer::new(spec.clone(), params));
        }
        if arrays.next().is_some() {
            return Err(AnnError::InvalidNetwork("unused parameter arrays".into()));
        }
        let net = Self {
            input: header.spec.input,
            class_count: header.spec.class_count,
            layers,
            train_config: header.train_config,
        };
        net.check()?;
        Ok(net)
    }
}

/// Stack normalized images `indices` of `data` into a `[n, ...input]` tensor.
pub fn images_to_tensor(data: &LabeledDataset, indices: &[usize], input: FeatureShape) -> Tensor {
    let mut values = Vec::with_capacity(indices.len() * data.image_len());
    for &i in indices {
        values.extend(data.image(i).iter().map(|&v| v as f64 / 255.0));
    }
    Tensor::from_parts(input.batch_shape(indices.len()), values)
}

/// Fraction of items whose argmax prediction matches the label.
pub fn evaluate(net: &TrainedNetwork, data: &LabeledDataset) -> Result<f64, AnnError> {
    if data.is_empty() {
        return Err(AnnError::EmptyDataset);
    }
    let predicted = net.predict(data)?;
    let correct = predicted
        .iter()
        .zip(data.labels())
        .filter(|(p, &l)| **p == l as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
