use super::spec::TrainHyper;
use super::{Param, Scalar};

/// First and second moment estimates for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Optimizer state for a whole network, one entry per parameter in
/// `Network::params_mut` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[&mut Param<T>]) -> Self {
        AdamState {
            step: 0,
            moments: params.iter().map(|p| AdamMoments::zeros(p.len())).collect(),
        }
    }

    /// Applies one update to every parameter using its accumulated gradient.
    pub fn update<T: Scalar>(&mut self, params: Vec<&mut Param<T>>, hyper: &TrainHyper) {
        self.step += 1;
        for (p, mom) in params.into_iter().zip(&mut self.moments) {
            adam_step(p, mom, self.step, hyper);
        }
    }
}

/// One bias-corrected ADAM update at step `t` (1-based).
pub fn adam_step<T: Scalar>(param: &mut Param<T>, moments: &mut AdamMoments, t: u64, hyper: &TrainHyper) {
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (k, (w, g)) in param.value.iter_mut().zip(&param.grad).enumerate() {
        let g = g.f64();
        let m = b1 * moments.m[k] + (1.0 - b1) * g;
        let v = b2 * moments.v[k] + (1.0 - b2) * g * g;
        moments.m[k] = m;
        moments.v[k] = v;
        let step = hyper.learning_rate * (m / c1) / ((v / c2).sqrt() + hyper.eps);
        *w = T::of(w.f64() - step);
    }
}
