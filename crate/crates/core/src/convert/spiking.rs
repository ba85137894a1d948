use serde::{Deserialize, Serialize};

use super::{ConversionConfig, ConvertError};
use crate::ann::{AnnError, FeatureShape, Layer, LayerParams, LayerSpec, TrainedNetwork};
use crate::container::{self, ContainerError};
use crate::neuron::NeuronParams;
use crate::tensor::Tensor;

pub const SPIKING_FORMAT_VERSION: u32 = 1;
const SPIKING_MAGIC: &[u8; 8] = b"SPKCSNN\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronRole {
    /// Stands in for a ReLU of the source network.
    Hidden,
    /// Final layer whose spike counts are read out as class scores.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronStage {
    pub params: NeuronParams,
    pub role: NeuronRole,
    /// Normalization scale `s_l` of the pre-activations feeding this stage.
    pub scale: f64,
    /// Spiking neurons per analog unit.
    pub replication: usize,
}

/// One stage of a spiking network. Linear stages hold a conv2d, dense,
/// avg_pool or flatten layer; the chain of linear stages in front of a
/// neuron stage defines its synapses and bias currents.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Linear(Layer),
    Neurons(NeuronStage),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikingNetwork {
    pub input: FeatureShape,
    pub class_count: usize,
    stages: Vec<Stage>,
    /// Fingerprint of the network this one was converted from, if any.
    pub source_fingerprint: String,
}

fn non_compliant(detail: String) -> ConvertError {
    ConvertError::NonCompliantTopology(detail)
}

impl SpikingNetwork {
    /// Checked constructor: linear stages are conv2d/dense/avg_pool/flatten
    /// only, every neuron stage follows at least one linear stage, and the
    /// network ends in a single output stage of `class_count` neurons.
    pub fn new(
        input: FeatureShape,
        class_count: usize,
        stages: Vec<Stage>,
    ) -> Result<Self, ConvertError> {
        let mut shape = input;
        let mut chain = 0;
        for (i, stage) in stages.iter().enumerate() {
            match stage {
                Stage::Linear(layer) => {
                    if !matches!(
                        layer.spec,
                        LayerSpec::Conv2d { .. }
                            | LayerSpec::Dense { .. }
                            | LayerSpec::AvgPool { .. }
                            | LayerSpec::Flatten
                    ) {
                        return Err(non_compliant(format!(
                            "stage {i}: {} has no spiking equivalent",
                            layer.spec.name()
                        )));
                    }
                    shape = layer.spec.output_shape(shape)?;
                    chain += 1;
                }
                Stage::Neurons(n) => {
                    if chain == 0 {
                        return Err(non_compliant(format!(
                            "stage {i}: neurons without incoming synapses"
                        )));
                    }
                    n.params.validate()?;
                    if !(n.scale > 0.0 && n.scale.is_finite()) {
                        return Err(non_compliant(format!(
                            "stage {i}: scale {} must be positive",
                            n.scale
                        )));
                    }
                    if n.replication == 0 {
                        return Err(non_compliant(format!(
                            "stage {i}: replication must be at least 1"
                        )));
                    }
                    let last = i + 1 == stages.len();
                    if (n.role == NeuronRole::Output) != last {
                        return Err(non_compliant(format!(
                            "stage {i}: output neurons must form the final stage"
                        )));
                    }
                    if last && (n.replication != 1 || shape != FeatureShape::Flat(class_count)) {
                        return Err(non_compliant(format!(
                            "output stage must be {class_count} unreplicated neurons, found {shape:?} x{}",
                            n.replication
                        )));
                    }
                    chain = 0;
                }
            }
        }
        if !matches!(stages.last(), Some(Stage::Neurons(_))) {
            return Err(non_compliant("network must end with output neurons".into()));
        }
        let net = Self {
            input,
            class_count,
            stages,
            source_fingerprint: String::new(),
        };
        net.to_trained().check()?;
        Ok(net)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn neuron_stages(&self) -> impl Iterator<Item = &NeuronStage> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Neurons(n) => Some(n),
            Stage::Linear(_) => None,
        })
    }

    pub fn scales(&self) -> Vec<f64> {
        self.neuron_stages().map(|n| n.scale).collect()
    }

    pub(super) fn set_scales(&mut self, scales: &[f64]) -> Result<(), ConvertError> {
        let count = self.neuron_stages().count();
        if scales.len() != count {
            return Err(non_compliant(format!(
                "{} scales for {count} neuron stages",
                scales.len()
            )));
        }
        let mut it = scales.iter();
        for stage in &mut self.stages {
            if let Stage::Neurons(n) = stage {
                n.scale = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Source-style layer list: hidden neuron stages read as ReLU and the
    /// output stage is implicit.
    pub fn topology(&self) -> Vec<LayerSpec> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Linear(l) => Some(l.spec.clone()),
                Stage::Neurons(n) if n.role == NeuronRole::Hidden => Some(LayerSpec::Relu),
                Stage::Neurons(_) => None,
            })
            .collect()
    }

    /// The rate-coded analog counterpart: ReLU for hidden stages, softmax
    /// on top.
    pub fn to_trained(&self) -> TrainedNetwork {
        let mut layers: Vec<Layer> = self
            .topology()
            .into_iter()
            .zip(
                self.stages
                    .iter()
                    .filter(|s| !matches!(s, Stage::Neurons(n) if n.role == NeuronRole::Output)),
            )
            .map(|(spec, stage)| match stage {
                Stage::Linear(l) => l.clone(),
                Stage::Neurons(_) => Layer::new(spec, LayerParams::None),
            })
            .collect();
        layers.push(Layer::new(LayerSpec::Softmax, LayerParams::None));
        TrainedNetwork {
            input: self.input,
            class_count: self.class_count,
            layers,
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SpikingHeader {
            format: "spikeconv-spiking-network".into(),
            input: self.input,
            class_count: self.class_count,
            source_fingerprint: self.source_fingerprint.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| match s {
                    Stage::Linear(l) => StageHeader::Linear {
                        spec: l.spec.clone(),
                        affine: matches!(l.params, LayerParams::Affine { .. }),
                    },
                    Stage::Neurons(n) => StageHeader::Neurons(n.clone()),
                })
                .collect(),
        };
        let arrays: Vec<(String, &Tensor)> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| match s {
                Stage::Linear(l) => l
                    .params
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("stage{i}.{n}"), t))
                    .collect(),
                Stage::Neurons(_) => vec![],
            })
            .collect();
        container::write(SPIKING_MAGIC, SPIKING_FORMAT_VERSION, &header, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ConvertError> {
        let (header, arrays): (SpikingHeader, Vec<(String, Tensor)>) = container::read(
            bytes,
            SPIKING_MAGIC,
            "spikeconv spiking network",
            SPIKING_FORMAT_VERSION,
        )
        .map_err(|e: ContainerError| ConvertError::Ann(AnnError::Container(e)))?;
        let mut arrays = arrays.into_iter().map(|(_, t)| t);
        let mut stages = Vec::with_capacity(header.stages.len());
        for sh in header.stages {
            stages.push(match sh {
                StageHeader::Linear { spec, affine } => {
                    let params = if affine {
                        let missing = || non_compliant("missing parameter array".into());
                        LayerParams::Affine {
                            weight: arrays.next().ok_or_else(missing)?,
                            bias: arrays.next().ok_or_else(missing)?,
                        }
                    } else {
                        LayerParams::None
                    };
                    Stage::Linear(Layer::new(spec, params))
                }
                StageHeader::Neurons(n) => Stage::Neurons(n),
            });
        }
        if arrays.next().is_some() {
            return Err(non_compliant("unused parameter arrays".into()));
        }
        let mut net = Self::new(header.input, header.class_count, stages)?;
        net.source_fingerprint = header.source_fingerprint;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct SpikingHeader {
    format: String,
    input: FeatureShape,
    class_count: usize,
    source_fingerprint: String,
    stages: Vec<StageHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
enum StageHeader {
    Linear { spec: LayerSpec, affine: bool },
    Neurons(NeuronStage),
}

/// Map a compliant network onto spiking stages: every ReLU becomes a stage
/// of `replication_factor` neurons per unit built from the template, the
/// final softmax (if any) is dropped and the logits feed output neurons.
/// Scales start at 1.
pub fn map_to_spiking(
    net: &TrainedNetwork,
    cfg: &ConversionConfig,
) -> Result<SpikingNetwork, ConvertError> {
    cfg.validate()?;
    net.check()?;
    let mut layers = &net.layers[..];
    if let Some((last, rest)) = layers.split_last() {
        if last.spec == LayerSpec::Softmax {
            layers = rest;
        }
    }
    let neurons = |role, replication| {
        Stage::Neurons(NeuronStage {
            params: cfg.neuron_template,
            role,
            scale: 1.0,
            replication,
        })
    };
    let mut stages = Vec::with_capacity(layers.len() + 1);
    for (i, layer) in layers.iter().enumerate() {
        match layer.spec {
            LayerSpec::Relu => stages.push(neurons(NeuronRole::Hidden, cfg.replication_factor)),
            LayerSpec::Conv2d { .. }
            | LayerSpec::Dense { .. }
            | LayerSpec::AvgPool { .. }
            | LayerSpec::Flatten => stages.push(Stage::Linear(layer.clone())),
            _ => return Err(non_compliant(format!("layer {i} is {}", layer.spec.name()))),
        }
    }
    stages.push(neurons(NeuronRole::Output, 1));
    SpikingNetwork::new(net.input, net.class_count, stages)
}
