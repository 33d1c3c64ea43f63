//! Layer kernels. Activations are dense `[N, C, H, W]` buffers.
//!
//! Per-item work is spread over rayon; gradient partials are produced per item
//! and reduced in item order so results never depend on the thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{axpy, dot, Param, Scalar};
use crate::error::{Error, Result};

fn uniform_init<T: Scalar>(p: &mut Param<T>, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in p.value.iter_mut() {
        *v = T::of(rng.random_range(-bound..bound));
    }
}

/// Valid output-column range for kernel column `dx` with left padding `pad`:
/// `(out_lo, in_lo, len)`.
#[inline]
fn col_span(dx: usize, pad: usize, w: usize) -> Option<(usize, usize, usize)> {
    let lo = pad.saturating_sub(dx);
    let hi = (w + pad).saturating_sub(dx).min(w);
    (hi > lo).then(|| (lo, lo + dx - pad, hi - lo))
}

#[inline]
fn src_row(yr: usize, dy: usize, pad: usize, h: usize) -> Option<usize> {
    let s = (yr + dy).checked_sub(pad)?;
    (s < h).then_some(s)
}

/// Stride-1 convolution with "same" zero padding. Even kernels pad one extra
/// row/column at the bottom/right.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut weight = Param::zeros(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel.0, kernel.1],
        );
        uniform_init(&mut weight, in_channels * kernel.0 * kernel.1, rng);
        Conv2d {
            weight,
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn pads(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }

    #[inline]
    fn w_at(&self, o: usize, c: usize, dy: usize, dx: usize) -> T {
        let (kh, kw) = self.kernel;
        self.weight.value[((o * self.in_channels + c) * kh + dy) * kw + dx]
    }

    pub fn forward(&self, x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let (kh, kw) = self.kernel;
        let (pt, pl) = self.pads();
        debug_assert_eq!(x.len(), n * ci * h * w);
        let mut y = vec![T::zero(); n * co * h * w];
        y.par_chunks_mut(co * h * w).enumerate().for_each(|(item, yi)| {
            let xi = &x[item * ci * h * w..(item + 1) * ci * h * w];
            for o in 0..co {
                let yo = &mut yi[o * h * w..(o + 1) * h * w];
                yo.iter_mut().for_each(|v| *v = self.bias.value[o]);
                for c in 0..ci {
                    for dy in 0..kh {
                        for yr in 0..h {
                            let Some(sr) = src_row(yr, dy, pt, h) else {
                                continue;
                            };
                            let xrow = &xi[(c * h + sr) * w..(c * h + sr + 1) * w];
                            let yrow = &mut yo[yr * w..(yr + 1) * w];
                            for dx in 0..kw {
                                if let Some((lo, ilo, len)) = col_span(dx, pl, w) {
                                    axpy(self.w_at(o, c, dy, dx), &xrow[ilo..ilo + len], &mut yrow[lo..lo + len]);
                                }
                            }
                        }
                    }
                }
            }
        });
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &mut self,
        x: &[T],
        gy: &[T],
        n: usize,
        h: usize,
        w: usize,
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let (kh, kw) = self.kernel;
        let (pt, pl) = self.pads();
        let this = &*self;
        let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|item| {
                let xi = &x[item * ci * h * w..(item + 1) * ci * h * w];
                let gyi = &gy[item * co * h * w..(item + 1) * co * h * w];
                let mut gw = vec![T::zero(); this.weight.len()];
                let mut gb = vec![T::zero(); co];
                let mut gx = if need_input_grad {
                    vec![T::zero(); ci * h * w]
                } else {
                    Vec::new()
                };
                for o in 0..co {
                    let go = &gyi[o * h * w..(o + 1) * h * w];
                    gb[o] = go.iter().copied().sum();
                    for c in 0..ci {
                        for dy in 0..kh {
                            for yr in 0..h {
                                let Some(sr) = src_row(yr, dy, pt, h) else {
                                    continue;
                                };
                                let grow = &go[yr * w..(yr + 1) * w];
                                let xrow = &xi[(c * h + sr) * w..(c * h + sr + 1) * w];
                                for dx in 0..kw {
                                    let Some((lo, ilo, len)) = col_span(dx, pl, w) else {
                                        continue;
                                    };
                                    let widx = ((o * ci + c) * kh + dy) * kw + dx;
                                    gw[widx] += dot(&grow[lo..lo + len], &xrow[ilo..ilo + len]);
                                    if need_input_grad {
                                        let base = (c * h + sr) * w;
                                        axpy(
                                            this.weight.value[widx],
                                            &grow[lo..lo + len],
                                            &mut gx[base + ilo..base + ilo + len],
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
                (gw, gb, gx)
            })
            .collect();

        let mut gx_all = if need_input_grad {
            Vec::with_capacity(n * ci * h * w)
        } else {
            Vec::new()
        };
        for (gw, gb, gx) in partials {
            self.weight.grad.iter_mut().zip(&gw).for_each(|(a, b)| *a += *b);
            self.bias.grad.iter_mut().zip(&gb).for_each(|(a, b)| *a += *b);
            gx_all.extend(gx);
        }
        need_input_grad.then_some(gx_all)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Number of training batches folded into the running statistics.
    pub tracked: u64,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[channels]);
        gamma.value.iter_mut().for_each(|g| *g = T::one());
        BatchNorm2d {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            tracked: 0,
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: &[T], n: usize, hw: usize) -> (Vec<T>, BnCache<T>) {
        let ch = self.channels();
        let count = (n * hw) as f64;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); ch];
        for c in 0..ch {
            let plane = |item: usize| &x[(item * ch + c) * hw..(item * ch + c + 1) * hw];
            let mean = (0..n)
                .map(|i| plane(i).iter().map(|v| v.f64()).sum::<f64>())
                .sum::<f64>()
                / count;
            let var = (0..n)
                .map(|i| plane(i).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = T::of(istd);
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let (m, s) = (T::of(mean), T::of(istd));
            for item in 0..n {
                let r = (item * ch + c) * hw..(item * ch + c + 1) * hw;
                for ((xv, xh), yv) in x[r.clone()].iter().zip(&mut xhat[r.clone()]).zip(&mut y[r]) {
                    *xh = (*xv - m) * s;
                    *yv = g * *xh + b;
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean[c] = T::of((1.0 - mom) * self.running_mean[c].f64() + mom * mean);
            self.running_var[c] = T::of((1.0 - mom) * self.running_var[c].f64() + mom * unbiased);
        }
        self.tracked += 1;
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &[T], n: usize, hw: usize) -> Result<Vec<T>> {
        if self.tracked == 0 {
            return Err(Error::UntrainedBatchNorm);
        }
        let ch = self.channels();
        let mut y = x.to_vec();
        for c in 0..ch {
            let s = T::of(1.0 / (self.running_var[c].f64() + self.eps).sqrt());
            let scale = self.gamma.value[c] * s;
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for item in 0..n {
                y[(item * ch + c) * hw..(item * ch + c + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BnCache<T>, gy: &[T], n: usize, hw: usize) -> Vec<T> {
        let ch = self.channels();
        let count = T::of((n * hw) as f64);
        let mut gx = vec![T::zero(); gy.len()];
        for c in 0..ch {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for item in 0..n {
                let r = (item * ch + c) * hw..(item * ch + c + 1) * hw;
                sum_g += gy[r.clone()].iter().map(|v| v.f64()).sum::<f64>();
                sum_gx += dot(&gy[r.clone()], &cache.xhat[r]).f64();
            }
            self.gamma.grad[c] += T::of(sum_gx);
            self.beta.grad[c] += T::of(sum_g);
            let k = self.gamma.value[c] * cache.inv_std[c] / count;
            let (sg, sgx) = (T::of(sum_g), T::of(sum_gx));
            for item in 0..n {
                let r = (item * ch + c) * hw..(item * ch + c + 1) * hw;
                for ((g, xh), out) in gy[r.clone()].iter().zip(&cache.xhat[r.clone()]).zip(&mut gx[r]) {
                    *out = k * (count * *g - sg - *xh * sgx);
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm2d<U> {
        BatchNorm2d {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| U::of(v.f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::of(v.f64())).collect(),
            tracked: self.tracked,
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `gy` where the ReLU output was not positive.
pub(crate) fn relu_backward<T: Scalar>(out: &[T], gy: &mut [T]) {
    gy.iter_mut().zip(out).for_each(|(g, y)| {
        if *y <= T::zero() {
            *g = T::zero()
        }
    });
}

/// Inverted-dropout mask: 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Non-overlapping max pooling; returns the output and, per output cell, the
/// flat input index of its maximum.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    pool: (usize, usize),
) -> (Vec<T>, Vec<u32>) {
    let (ph, pw) = pool;
    let (oh, ow) = (h / ph, w / pw);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * ph * w + ox * pw;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let idx = base + (oy * ph + dy) * w + ox * pw + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(gy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (g, &i) in gy.iter().zip(arg) {
        gx[i as usize] += *g;
    }
    gx
}

/// Fully connected layer, `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut weight = Param::zeros(format!("{name}.weight"), &[outputs, inputs]);
        uniform_init(&mut weight, inputs, rng);
        Linear {
            weight,
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let (ni, no) = (self.inputs(), self.outputs());
        let mut y = Vec::with_capacity(n * no);
        for item in 0..n {
            let xi = &x[item * ni..(item + 1) * ni];
            for o in 0..no {
                y.push(self.bias.value[o] + dot(&self.weight.value[o * ni..(o + 1) * ni], xi));
            }
        }
        y
    }

    pub fn backward(&mut self, x: &[T], gy: &[T], n: usize) -> Vec<T> {
        let (ni, no) = (self.inputs(), self.outputs());
        let mut gx = vec![T::zero(); n * ni];
        for item in 0..n {
            let xi = &x[item * ni..(item + 1) * ni];
            for o in 0..no {
                let g = gy[item * no + o];
                self.bias.grad[o] += g;
                axpy(g, xi, &mut self.weight.grad[o * ni..(o + 1) * ni]);
                axpy(
                    g,
                    &self.weight.value[o * ni..(o + 1) * ni],
                    &mut gx[item * ni..(item + 1) * ni],
                );
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Row-wise log-softmax of an `[n, k]` buffer.
pub fn log_softmax<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|v| (*v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|v| *v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    /// Direct definition of a same-padded convolution, used as an oracle.
    fn conv_naive(conv: &Conv2d<f64>, x: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
        let (kh, kw) = conv.kernel;
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let (ci, co) = (conv.in_channels, conv.out_channels);
        let mut y = vec![0.0; n * co * h * w];
        for item in 0..n {
            for o in 0..co {
                for yr in 0..h {
                    for xc in 0..w {
                        let mut s = conv.bias.value[o];
                        for c in 0..ci {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let sr = yr as isize + dy as isize - pt as isize;
                                    let sc = xc as isize + dx as isize - pl as isize;
                                    if sr >= 0 && sr < h as isize && sc >= 0 && sc < w as isize {
                                        s += conv.weight.value[((o * ci + c) * kh + dy) * kw + dx]
                                            * x[((item * ci + c) * h + sr as usize) * w + sc as usize];
                                    }
                                }
                            }
                        }
                        y[((item * co + o) * h + yr) * w + xc] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_definition() {
        let mut rng = rng_for(&[1]);
        for kernel in [(2, 4), (2, 5), (1, 1), (3, 3)] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, kernel, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let x: Vec<f64> = (0..2 * 2 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv.forward(&x, 2, 2, 9);
            let slow = conv_naive(&conv, &x, 2, 2, 9);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{kernel:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_keeps_shape() {
        let mut rng = rng_for(&[2]);
        let conv = Conv2d::<f32>::new("c", 1, 2, (2, 256), &mut rng);
        let y = conv.forward(&vec![1.0; 2 * 300], 1, 2, 300);
        assert_eq!(y.len(), 2 * 2 * 300);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0f64, 2.0, 3.0, -1000.0, 0.0, 1000.0], 3);
        for row in lp.chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_bn_requires_training() {
        let bn = BatchNorm2d::<f32>::new("bn", 2, 0.1, 1e-5);
        assert!(matches!(
            bn.forward_eval(&[0.0; 4], 1, 2),
            Err(Error::UntrainedBatchNorm)
        ));
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1, 0.1, 0.0);
        let (y, _) = bn.forward_train(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = [1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0];
        let (y, arg) = maxpool_forward(&x, 1, 1, 2, 4, (2, 2));
        assert_eq!(y, vec![5.0, 9.0]);
        let gx = maxpool_backward(&[1.0, 2.0], &arg, 8);
        assert_eq!(gx, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
