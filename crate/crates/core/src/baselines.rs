//! Softmax-classifier novelty baselines: maximum logit and OpenMax.

use crate::error::{Error, Result};
use crate::fingerprint::ModelOutputs;

/// Higher means more likely unknown.
pub fn maxlogit_score(logits: &[f32]) -> f64 {
    -logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64
}

/// Two-parameter Weibull (location `shift`, usually 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
    pub shift: f64,
}

impl Weibull {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.shift {
            return 0.0;
        }
        1.0 - (-((x - self.shift) / self.scale).powf(self.shape)).exp()
    }
}

/// Maximum-likelihood Weibull fit with zero location. The shape solves
/// `Σ xᵏ ln x / Σ xᵏ − 1/k − mean(ln x) = 0` (Newton with a bisection
/// fallback); the scale follows in closed form.
pub fn fit_weibull(samples: &[f64]) -> Result<Weibull> {
    if samples.len() < 2 {
        return Err(Error::WeibullFit(format!("{} samples; need at least 2", samples.len())));
    }
    if let Some(x) = samples.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::WeibullFit(format!("sample {x} is not positive and finite")));
    }
    let top = samples.iter().copied().fold(0.0, f64::max);
    // Work on x / max so xᵏ never overflows; the shape equation is scale-free.
    let logs: Vec<f64> = samples.iter().map(|x| (x / top).ln()).collect();
    let n = logs.len() as f64;
    let mean_log = logs.iter().sum::<f64>() / n;
    let var_log = logs.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / n;
    if var_log < 1e-24 {
        return Err(Error::WeibullFit("samples are all equal".into()));
    }
    let eval = |k: f64| {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &logs {
            let w = (k * l).exp();
            s0 += w;
            s1 += w * l;
            s2 += w * l * l;
        }
        let f = s1 / s0 - 1.0 / k - mean_log;
        let df = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
        (f, df, s0)
    };
    // f is increasing in k; bracket the root.
    let (mut lo, mut hi) = (1e-3, 1.0);
    while eval(hi).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::WeibullFit("shape diverged".into()));
        }
    }
    let mut k = (1.2 / var_log.sqrt()).clamp(lo, hi);
    for _ in 0..200 {
        let (f, df, _) = eval(k);
        if f.abs() < 1e-12 {
            break;
        }
        if f < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let next = k - f / df;
        k = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    let s0 = eval(k).2;
    let scale = top * (s0 / n).powf(1.0 / k);
    Ok(Weibull {
        shape: k,
        scale,
        shift: 0.0,
    })
}

/// Tail model of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tail {
    Fitted(Weibull),
    /// Distances carried no spread; the class never reports novelty.
    Degenerate,
}

impl Tail {
    pub fn cdf(&self, d: f64) -> f64 {
        match self {
            Tail::Fitted(w) => w.cdf(d),
            Tail::Degenerate => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenMaxModel {
    /// Mean logit vector of correctly classified samples, per class.
    pub mavs: Vec<Vec<f64>>,
    pub tails: Vec<Tail>,
    /// Tail size used per class (may be clamped below the requested size).
    pub tail_sizes: Vec<usize>,
    pub alpha: usize,
}

pub const DEFAULT_TAIL_SIZE: usize = 20;
pub const DEFAULT_ALPHA: usize = 3;

fn euclidean(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Fits mean activation vectors and Weibull tails from training outputs.
/// Only slices whose prediction matches their class contribute.
pub fn fit_openmax(
    outputs: &ModelOutputs,
    class_device_ids: &[u32],
    tail_size: usize,
    alpha: usize,
) -> Result<OpenMaxModel> {
    let k = outputs.n_classes;
    if alpha == 0 || alpha > k {
        return Err(Error::Config(format!("alpha {alpha} must be in 1..={k}")));
    }
    if tail_size < 2 {
        return Err(Error::Config(format!("tail size {tail_size} must be at least 2")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut all: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..outputs.len() {
        let id = outputs.device_ids[i];
        let class = class_device_ids
            .iter()
            .position(|&d| d == id)
            .ok_or_else(|| Error::Config(format!("device {id} is not a class of this model")))?;
        all[class].push(i);
        if outputs.predictions[i] == class {
            members[class].push(i);
        }
    }
    let mut mavs = Vec::with_capacity(k);
    let mut tails = Vec::with_capacity(k);
    let mut tail_sizes = Vec::with_capacity(k);
    for (c, idx) in members.iter().enumerate() {
        let idx = if idx.is_empty() {
            if all[c].is_empty() {
                return Err(Error::NoValidSlices(class_device_ids[c]));
            }
            log::warn!(
                "class {c} (device {}): no correctly classified samples; using all of its samples",
                class_device_ids[c]
            );
            &all[c]
        } else {
            idx
        };
        let mut mav = vec![0.0; k];
        for &i in idx {
            for (m, &v) in mav.iter_mut().zip(outputs.logits_of(i)) {
                *m += v as f64;
            }
        }
        mav.iter_mut().for_each(|m| *m /= idx.len() as f64);
        let mut dist: Vec<f64> = idx.iter().map(|&i| euclidean(&mav, outputs.logits_of(i))).collect();
        dist.sort_by(|a, b| b.total_cmp(a));
        let eta = if dist.len() < tail_size {
            log::warn!(
                "class {c} (device {}): {} correct samples, tail size reduced from {tail_size}",
                class_device_ids[c],
                dist.len()
            );
            dist.len()
        } else {
            tail_size
        };
        let tail: Vec<f64> = dist[..eta].to_vec();
        let model = if tail.len() < 2 || tail.iter().all(|d| *d == tail[0]) || tail.iter().any(|d| *d <= 0.0) {
            log::warn!(
                "class {c} (device {}): degenerate distance tail; treated as never novel",
                class_device_ids[c]
            );
            Tail::Degenerate
        } else {
            Tail::Fitted(fit_weibull(&tail)?)
        };
        mavs.push(mav);
        tails.push(model);
        tail_sizes.push(eta);
    }
    Ok(OpenMaxModel {
        mavs,
        tails,
        tail_sizes,
        alpha,
    })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Revises class probabilities given each class's tail probability.
///
/// The top-α classes by activation lose a fraction `w_r · cdf_c` of their
/// softmax probability, `w_r = (α − r + 1)/α` for rank `r = 1..α`; the
/// removed mass becomes the unknown class (last entry).
pub fn revise(logits: &[f32], cdfs: &[f64], alpha: usize) -> Vec<f64> {
    let k = logits.len();
    let v: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    let mut p = softmax(&v);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut unknown = 0.0;
    for (r, &c) in order.iter().take(alpha).enumerate() {
        let w = (alpha - r) as f64 / alpha as f64;
        let removed = p[c] * w * cdfs[c];
        p[c] -= removed;
        unknown += removed;
    }
    p.push(unknown);
    p
}

/// Revised probabilities over the known classes plus unknown, and the
/// unknown probability as the novelty score.
pub fn openmax_score(model: &OpenMaxModel, logits: &[f32]) -> (Vec<f64>, f64) {
    let cdfs: Vec<f64> = model
        .mavs
        .iter()
        .zip(&model.tails)
        .map(|(mav, tail)| tail.cdf(euclidean(mav, logits)))
        .collect();
    let p = revise(logits, &cdfs, model.alpha);
    let unknown = p[logits.len()];
    (p, unknown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand_distr::{Distribution, Weibull as WeibullDist};

    #[test]
    fn maxlogit_examples() {
        assert_eq!(maxlogit_score(&[2.0, -1.0, 0.5]), -2.0);
        assert_eq!(maxlogit_score(&[3.0, 0.0, 1.5]), -3.0);
    }

    #[test]
    fn weibull_recovers_parameters() {
        let mut rng = rng_for(&[21]);
        let dist = WeibullDist::new(1.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..500).map(|_| dist.sample(&mut rng)).collect();
        let fit = fit_weibull(&xs).unwrap();
        assert!((fit.shape - 2.0).abs() < 0.4, "{fit:?}");
        assert!((fit.scale - 1.0).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn weibull_rejects_degenerate_input() {
        assert!(fit_weibull(&[1.0, 1.0, 1.0]).is_err());
        assert!(fit_weibull(&[1.0, 0.0]).is_err());
        assert!(fit_weibull(&[1.0]).is_err());
    }

    #[test]
    fn zero_cdf_keeps_softmax() {
        let p = revise(&[1.0, 2.0, 0.5], &[0.0; 3], 3);
        let plain = softmax(&[1.0, 2.0, 0.5]);
        assert_eq!(p[3], 0.0);
        for c in 0..3 {
            assert!((p[c] - plain[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_one_damps_only_the_argmax() {
        let p = revise(&[1.0, 2.0, 0.5], &[0.5; 3], 1);
        let plain = softmax(&[1.0, 2.0, 0.5]);
        assert!((p[1] - plain[1] * 0.5).abs() < 1e-15);
        assert_eq!((p[0], p[2]), (plain[0], plain[2]));
    }

    #[test]
    fn hand_example_full_tail() {
        // softmax(ln 1, ln 2, ln 5) = (0.125, 0.25, 0.625); ranks: c2, c1, c0.
        let logits = [0.0f32, (2.0f64).ln() as f32, (5.0f64).ln() as f32];
        let p = revise(&logits, &[1.0; 3], 3);
        let expected_unknown = 0.625 * 1.0 + 0.25 * (2.0 / 3.0) + 0.125 * (1.0 / 3.0);
        assert!((p[3] - expected_unknown).abs() < 1e-6, "{p:?}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn outputs(logits: Vec<f32>, devices: Vec<u32>, predictions: Vec<usize>) -> ModelOutputs {
        ModelOutputs {
            slice_indices: (0..devices.len()).collect(),
            device_ids: devices,
            n_classes: 2,
            logits,
            predictions,
            hidden: 0,
            source: Default::default(),
            rows_per_slice: 0,
            current: vec![],
            previous: vec![],
        }
    }

    #[test]
    fn identical_activations_give_degenerate_tail() {
        let out = outputs(
            vec![2.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.5, 1.5, 0.1, 2.0],
            vec![5, 5, 6, 6, 6],
            vec![0, 0, 1, 1, 1],
        );
        let om = fit_openmax(&out, &[5, 6], 20, 1).unwrap();
        assert_eq!(om.tails[0], Tail::Degenerate);
        assert_eq!(om.tail_sizes, vec![2, 3]);
        assert!(matches!(om.tails[1], Tail::Fitted(_)));
        assert_eq!(openmax_score(&om, &[50.0, -50.0]).1, 0.0);
    }

    #[test]
    fn class_without_correct_samples_falls_back() {
        let out = outputs(vec![2.0, 0.0, 2.0, 0.0], vec![5, 6], vec![0, 0]);
        let om = fit_openmax(&out, &[5, 6], 20, 2).unwrap();
        assert_eq!(om.mavs[1], vec![2.0, 0.0]);
        let none = outputs(vec![2.0, 0.0], vec![5], vec![0]);
        assert!(matches!(
            fit_openmax(&none, &[5, 6], 20, 2),
            Err(Error::NoValidSlices(6))
        ));
    }
}
