//! Mini-batch SGD on softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::network::{images_to_tensor, NetworkSpec, TrainedNetwork};
use super::AnnError;
use crate::dataset::LabeledDataset;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Classical momentum coefficient; 0 gives plain SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 64,
            epochs: 4,
            seed: 1,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<(), AnnError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AnnError::InvalidConfig(
                "learning rate must be a finite non-negative number".into(),
            ));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(AnnError::InvalidConfig(format!(
                "batch size {} must lie in 1..={dataset_len}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(AnnError::InvalidConfig("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AnnError::InvalidConfig(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Initialize `spec` from `cfg.seed` and train it.
pub fn train(
    spec: &NetworkSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(TrainedNetwork, Vec<EpochStats>), AnnError> {
    spec.validate()?;
    let mut net = TrainedNetwork::initialize(spec, cfg.seed)?;
    let history = train_from(&mut net, data, cfg)?;
    Ok((net, history))
}

/// Continue training `net` in place. Deterministic given `cfg.seed`.
pub fn train_from(
    net: &mut TrainedNetwork,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, AnnError> {
    if data.is_empty() {
        return Err(AnnError::EmptyDataset);
    }
    cfg.validate(data.len())?;
    net.spec().validate()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut velocity: Vec<Vec<Tensor>> = net
        .layers
        .iter()
        .map(|l| {
            l.params
                .trainable()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = images_to_tensor(data, batch, net.input);
            let labels: Vec<usize> = batch.iter().map(|&i| data.label(i) as usize).collect();
            let out = step_with_velocity(net, &x, &labels, cfg, &mut velocity, &mut dropout_rng)?;
            if !out.loss.is_finite() {
                return Err(AnnError::Divergence {
                    epoch,
                    step,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    net.train_config = Some(cfg.clone());
    Ok(history)
}

struct StepOutcome {
    loss: f64,
    correct: usize,
}

/// One plain SGD step on a single batch; returns the batch's mean
/// cross-entropy before the update.
pub fn sgd_step(
    net: &mut TrainedNetwork,
    input: &Tensor,
    labels: &[usize],
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, AnnError> {
    let cfg = TrainConfig {
        learning_rate,
        ..TrainConfig::default()
    };
    let mut velocity: Vec<Vec<Tensor>> = net.layers.iter().map(|_| Vec::new()).collect();
    Ok(step_with_velocity(net, input, labels, &cfg, &mut velocity, rng)?.loss)
}

fn step_with_velocity(
    net: &mut TrainedNetwork,
    input: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    velocity: &mut [Vec<Tensor>],
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, AnnError> {
    let n = labels.len();
    if input.batch() != n {
        return Err(AnnError::InvalidConfig(format!(
            "{} labels for a batch of {}",
            n,
            input.batch()
        )));
    }
    let mut caches = Vec::with_capacity(net.layers.len());
    let mut x = input.clone();
    for layer in &net.layers {
        let (y, cache) = layer.forward_train(&x, rng)?;
        caches.push(cache);
        x = y;
    }
    let probs = x;
    let classes = probs.len() / n;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        let row = &probs.data()[i * classes..(i + 1) * classes];
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
        if argmax(row) == label {
            correct += 1;
        }
        grad[i * classes + label] -= 1.0;
    }
    loss /= n as f64;
    grad.iter_mut().for_each(|g| *g /= n as f64);
    // Softmax and cross-entropy combine into (p - onehot) / n at the logits.
    let last = net.layers.len() - 1;
    debug_assert_eq!(net.layers[last].spec, LayerSpec::Softmax);
    let mut grad = Tensor::from_parts(probs.shape().to_vec(), grad);
    for i in (0..last).rev() {
        let (dx, param_grads) = net.layers[i].backward(Some(&caches[i]), &grad)?;
        net.layers[i].absorb_batch_stats(&caches[i]);
        if !param_grads.is_empty() {
            if velocity[i].is_empty() {
                velocity[i] = param_grads
                    .iter()
                    .map(|g| Tensor::zeros(g.shape()))
                    .collect();
            }
            for ((param, g), v) in net.layers[i]
                .params
                .trainable_mut()
                .into_iter()
                .zip(&param_grads)
                .zip(velocity[i].iter_mut())
            {
                if cfg.momentum > 0.0 {
                    for ((p, gi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
                    {
                        *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                        *p += *vi;
                    }
                } else {
                    for (p, gi) in param.data_mut().iter_mut().zip(g.data()) {
                        *p -= cfg.learning_rate * gi;
                    }
                }
            }
        }
        grad = dx;
    }
    Ok(StepOutcome { loss, correct })
}
