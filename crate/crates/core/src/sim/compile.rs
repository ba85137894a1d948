//! Lowering of a spiking network into per-layer synapse tables.

use crate::ann::{FeatureShape, Layer, LayerParams, LayerSpec};
use crate::convert::{SpikingNetwork, Stage};
use crate::neuron::NeuronParams;
use crate::tensor::Tensor;

use super::SimError;

/// Outgoing synapses in compressed-row form, one row per presynaptic unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Synapses {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl Synapses {
    pub fn row(&self, unit: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[unit], self.offsets[unit + 1]);
        (&self.targets[a..b], &self.weights[a..b])
    }

    pub fn sources(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// One neuron population with the synapses feeding it.
#[derive(Clone, Debug)]
pub struct CompiledLayer {
    /// Synapses from the previous population (or the input), already divided
    /// by that population's replication factor.
    pub synapses: Synapses,
    /// Constant drive per unit in activation units; multiplied by the peak
    /// rate it becomes a current.
    pub bias: Vec<f64>,
    pub units: usize,
    pub replication: usize,
    pub params: NeuronParams,
}

impl CompiledLayer {
    pub fn neurons(&self) -> usize {
        self.units * self.replication
    }
}

#[derive(Clone, Debug)]
pub struct CompiledNetwork {
    pub input: FeatureShape,
    pub class_count: usize,
    pub layers: Vec<CompiledLayer>,
}

const BASIS_CHUNK: usize = 256;

impl CompiledNetwork {
    /// Evaluate each linear chain on the zero input (bias) and on every basis
    /// vector with biases removed (synapse columns). Exact zeros are dropped.
    pub fn new(net: &SpikingNetwork) -> Result<Self, SimError> {
        let mut layers = Vec::new();
        let mut chain: Vec<Layer> = Vec::new();
        let mut in_shape = net.input;
        let mut prev_replication = 1;
        for stage in net.stages() {
            match stage {
                Stage::Linear(layer) => chain.push(layer.clone()),
                Stage::Neurons(n) => {
                    let (synapses, bias) = lower_chain(&chain, in_shape, prev_replication)?;
                    let mut shape = in_shape;
                    for l in &chain {
                        shape = l
                            .spec
                            .output_shape(shape)
                            .map_err(|e| SimError::ShapeMismatch(e.to_string()))?;
                    }
                    layers.push(CompiledLayer {
                        synapses,
                        units: bias.len(),
                        bias,
                        replication: n.replication,
                        params: n.params,
                    });
                    in_shape = shape;
                    prev_replication = n.replication;
                    chain.clear();
                }
            }
        }
        Ok(Self {
            input: net.input,
            class_count: net.class_count,
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input.len()
    }

    pub fn synapse_count(&self) -> usize {
        self.layers.iter().map(|l| l.synapses.len()).sum()
    }
}

fn lower_chain(
    chain: &[Layer],
    input: FeatureShape,
    replication: usize,
) -> Result<(Synapses, Vec<f64>), SimError> {
    let run = |layers: &[Layer], x: Tensor| -> Result<Tensor, SimError> {
        layers
            .iter()
            .try_fold(x, |x, l| l.forward_infer(&x))
            .map_err(|e| SimError::ShapeMismatch(e.to_string()))
    };
    let bias = run(chain, Tensor::zeros(&input.batch_shape(1)))?.into_data();
    let linear: Vec<Layer> = chain
        .iter()
        .map(|l| match &l.params {
            LayerParams::Affine { weight, bias } => Layer::new(
                l.spec.clone(),
                LayerParams::Affine {
                    weight: weight.clone(),
                    bias: Tensor::zeros(bias.shape()),
                },
            ),
            _ => l.clone(),
        })
        .collect();
    debug_assert!(linear
        .iter()
        .all(|l| !matches!(l.spec, LayerSpec::Relu | LayerSpec::MaxPool { .. })));
    let (n_in, n_out) = (input.len(), bias.len());
    let share = 1.0 / replication as f64;
    let mut offsets = Vec::with_capacity(n_in + 1);
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    offsets.push(0);
    for start in (0..n_in).step_by(BASIS_CHUNK) {
        let count = BASIS_CHUNK.min(n_in - start);
        let mut basis = Tensor::zeros(&input.batch_shape(count));
        for j in 0..count {
            basis.data_mut()[j * n_in + start + j] = 1.0;
        }
        let columns = run(&linear, basis)?;
        for col in columns.data().chunks_exact(n_out) {
            for (target, &w) in col.iter().enumerate() {
                if w != 0.0 {
                    targets.push(target as u32);
                    weights.push(w * share);
                }
            }
            offsets.push(targets.len());
        }
    }
    Ok((
        Synapses {
            offsets,
            targets,
            weights,
        },
        bias,
    ))
}
