use super::layers::{log_softmax, Linear};
use super::model::Network;
use super::train::{nll_grad, nll_loss};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose analytic and numeric gradients were both below the
    /// noise floor.
    pub skipped: usize,
}

const FLOOR: f64 = 1e-7;

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        if analytic.abs() < FLOOR && numeric.abs() < FLOOR {
            self.skipped += 1;
            return;
        }
        let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()));
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max)
        .map(|k| k * len / max + (k * 7919) % (len / max).max(1))
        .collect()
}

fn train_loss(net: &mut Network<f64>, inputs: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let (out, _) = net.forward_train(inputs, None)?;
    Ok(nll_loss(&out.log_probs, labels, net.spec.n_classes))
}

/// Compares backprop gradients of the mean NLL against central differences
/// with step `eps`. Dropout is disabled and batch norm uses batch statistics.
/// At most `max_per_param` entries of each parameter are probed.
pub fn grad_check(
    net: &mut Network<f64>,
    inputs: &[&[f64]],
    labels: &[usize],
    eps: f64,
    max_per_param: usize,
) -> Result<GradCheckReport> {
    let k = net.spec.n_classes;
    net.zero_grad();
    let (out, cache) = net.forward_train(inputs, None)?;
    net.backward(&cache, &nll_grad(&out.log_probs, labels, k));
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for idx in sample_indices(grads.len(), max_per_param) {
            let orig = net.params()[pi].value[idx];
            net.params_mut()[pi].value[idx] = orig + eps;
            let up = train_loss(net, inputs, labels)?;
            net.params_mut()[pi].value[idx] = orig - eps;
            let down = train_loss(net, inputs, labels)?;
            net.params_mut()[pi].value[idx] = orig;
            report.record(grads[idx], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Same check for a lone fully connected layer under log-softmax + NLL.
pub fn grad_check_linear(layer: &mut Linear<f64>, inputs: &[f64], labels: &[usize], eps: f64) -> GradCheckReport {
    let n = labels.len();
    let k = layer.outputs();
    let loss = |l: &Linear<f64>| nll_loss(&log_softmax(&l.forward(inputs, n), k), labels, k);
    layer.params_mut().into_iter().for_each(|p| p.zero_grad());
    let lp = log_softmax(&layer.forward(inputs, n), k);
    layer.backward(inputs, &nll_grad(&lp, labels, k), n);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for pi in 0..2 {
        let len = layer.params_mut()[pi].len();
        for idx in 0..len {
            let analytic = layer.params_mut()[pi].grad[idx];
            let orig = layer.params_mut()[pi].value[idx];
            layer.params_mut()[pi].value[idx] = orig + eps;
            let up = loss(layer);
            layer.params_mut()[pi].value[idx] = orig - eps;
            let down = loss(layer);
            layer.params_mut()[pi].value[idx] = orig;
            report.record(analytic, (up - down) / (2.0 * eps));
        }
    }
    report
}
