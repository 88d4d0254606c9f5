use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Architecture, Checkpoint, SmallCnn, TrainingMeta};
use crate::autodiff::Graph;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 5,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Fraction of `batch` classified correctly.
pub fn evaluate_accuracy(model: &SmallCnn, batch: &ImageBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("accuracy of an empty batch"));
    }
    let predicted = model.predict_labels(batch.images())?;
    let correct = predicted.iter().zip(batch.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Trains a fresh model with SGD and momentum (`v = m*v + g; p -= lr*v`).
///
/// Validation accuracy is logged after every epoch when a validation set is
/// given; the last value becomes the checkpoint's recorded accuracy.
pub fn train(
    arch: Architecture,
    train_set: &ImageBatch,
    validation: Option<&ImageBatch>,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if train_set.num_classes() != arch.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, architecture expects {}",
            train_set.num_classes(),
            arch.num_classes
        )));
    }
    let mut model = SmallCnn::init(arch, cfg.seed);
    let mut velocity: Vec<Tensor> = model.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut rng = seeded(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.select(idx);
            let mut g = Graph::new();
            let x = g.constant(batch.images().clone());
            let fwd = model
                .forward_graph(&mut g, x, true)
                .map_err(|e| diverged(e, epoch, step, f32::NAN))?;
            let loss = g
                .softmax_cross_entropy(fwd.logits, batch.labels())
                .map_err(|e| diverged(e, epoch, step, f32::NAN))?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: loss_value,
                });
            }
            let mut grads = g.backward(loss).map_err(|e| diverged(e, epoch, step, loss_value))?;
            for ((param, v), id) in model.parameters_mut().iter_mut().zip(&mut velocity).zip(&fwd.params) {
                let grad = grads.take(*id).expect("parameters are variables");
                for ((p, v), gr) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *v = cfg.momentum * *v + gr;
                    *p -= cfg.lr * *v;
                }
            }
            loss_sum += loss_value as f64;
            steps += 1;
        }
        if model.parameters().iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                step: steps,
                loss: f32::NAN,
            });
        }
        let mean_loss = loss_sum / steps.max(1) as f64;
        match validation {
            Some(val) => {
                let acc = evaluate_accuracy(&model, val)?;
                log::info!("epoch {}: loss {mean_loss:.4}, validation accuracy {acc:.4}", epoch + 1);
                history.push(acc);
            }
            None => log::info!("epoch {}: loss {mean_loss:.4}", epoch + 1),
        }
    }

    let meta = TrainingMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        lr: cfg.lr,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        train_samples: train_set.len(),
        train_fingerprint: train_set.fingerprint(),
        validation_accuracy: history.clone(),
        final_accuracy: history.last().copied(),
        test_accuracy: None,
    };
    Ok(Checkpoint::new(model, meta))
}

fn diverged(e: Error, epoch: usize, step: usize, loss: f32) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step, loss },
        other => other,
    }
}
