use rand::seq::SliceRandom;

use super::adam::AdamState;
use super::model::{ForwardOutput, Network};
use super::spec::{ModelSpec, TrainHyper};
use super::Scalar;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training slices classified correctly during the epoch
    /// (train mode, so with dropout).
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub hyper: TrainHyper,
    pub log: Vec<EpochLog>,
    /// Device id of each output class.
    pub class_device_ids: Vec<u32>,
}

impl TrainedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.network.spec
    }

    pub fn class_of(&self, device_id: u32) -> Option<usize> {
        self.class_device_ids.iter().position(|&d| d == device_id)
    }

    /// Eval-mode inference in chunks of `batch_size`.
    pub fn infer(&self, inputs: &[&[f32]]) -> Result<ForwardOutput<f32>> {
        let chunk = self.hyper.batch_size.max(1) * 8;
        let mut parts = inputs.chunks(chunk).map(|c| self.network.forward_eval(c));
        let mut out = match parts.next() {
            Some(first) => first?,
            None => return Err(Error::Shape("empty batch".into())),
        };
        for p in parts {
            let p = p?;
            out.batch += p.batch;
            out.logits.extend(p.logits);
            out.log_probs.extend(p.log_probs);
            if let (Some(acc), Some(h)) = (out.hidden.as_mut(), p.hidden) {
                acc.values.extend(h.values);
            }
        }
        Ok(out)
    }
}

/// Mean negative log-likelihood of `labels` under `log_probs` (`[n][k]`).
pub fn nll_loss<T: Scalar>(log_probs: &[T], labels: &[usize], k: usize) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_probs[i * k + y].f64())
        .sum();
    total / labels.len() as f64
}

/// Gradient of the mean NLL with respect to the logits.
pub(crate) fn nll_grad<T: Scalar>(log_probs: &[T], labels: &[usize], k: usize) -> Vec<T> {
    let n = labels.len();
    let scale = T::of(1.0 / n as f64);
    let mut g: Vec<T> = log_probs.iter().map(|lp| lp.exp() * scale).collect();
    for (i, &y) in labels.iter().enumerate() {
        g[i * k + y] -= scale;
    }
    g
}

/// Trains a freshly initialized network with minibatch ADAM on the mean NLL.
/// Everything random (initialization, shuffling, dropout) derives from
/// `hyper.seed`.
pub fn train(
    spec: &ModelSpec,
    inputs: &[&[f32]],
    labels: &[usize],
    class_device_ids: Vec<u32>,
    hyper: &TrainHyper,
) -> Result<TrainedModel> {
    spec.validate()?;
    hyper.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if class_device_ids.len() != spec.n_classes {
        return Err(Error::Config(format!(
            "{} class ids for a {}-class network",
            class_device_ids.len(),
            spec.n_classes
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= spec.n_classes) {
        return Err(Error::BadLabel {
            label,
            n_classes: spec.n_classes,
        });
    }

    let mut network = Network::<f32>::new(spec, hyper.seed)?;
    let mut adam = AdamState::new(&network.params_mut());
    let k = spec.n_classes;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut last_loss = f64::NAN;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng_for(&[hyper.seed, 0x5407, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<&[f32]> = idx.iter().map(|&i| inputs[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut drop_rng = rng_for(&[hyper.seed, 0xD20, epoch as u64, b as u64]);
            network.zero_grad();
            let (out, cache) = network.forward_train(&batch, Some(&mut drop_rng))?;
            let loss = nll_loss(&out.log_probs, &y, k);
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: b,
                    last_loss,
                });
            }
            last_loss = loss;
            loss_sum += loss * y.len() as f64;
            correct += out.predictions().iter().zip(&y).filter(|(p, t)| p == t).count();
            network.backward(&cache, &nll_grad(&out.log_probs, &y, k));
            adam.update(network.params_mut(), hyper);
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / inputs.len() as f64,
            train_accuracy: correct as f64 / inputs.len() as f64,
        };
        log::info!(
            "epoch {}/{}: loss {:.4}, train accuracy {:.3}",
            epoch + 1,
            hyper.epochs,
            entry.mean_loss,
            entry.train_accuracy
        );
        log.push(entry);
    }
    order.shuffle(&mut rng_for(&[hyper.seed, 0x5407, hyper.epochs as u64]));
    network.recalibrate_norms(
        order
            .chunks(hyper.batch_size)
            .map(|idx| idx.iter().map(|&i| inputs[i]).collect::<Vec<_>>()),
    )?;
    network.zero_grad();
    Ok(TrainedModel {
        network,
        hyper: hyper.clone(),
        log,
        class_device_ids,
    })
}
