use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{
    dropout_mask, log_softmax, maxpool_backward, maxpool_forward, relu_backward, relu_inplace, BatchNorm2d, BnCache,
    Conv2d, Linear,
};
use super::lstm::{backward_seq, forward_seq, LstmParams, SeqCache};
use super::spec::{Head, ModelSpec};
use super::{Param, Scalar};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active (when a generator is supplied).
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// LSTM hidden states for every item and step, `[batch][step][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace<T> {
    pub steps: usize,
    pub hidden: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> HiddenTrace<T> {
    pub fn state(&self, item: usize, step: usize) -> &[T] {
        let base = (item * self.steps + step) * self.hidden;
        &self.values[base..base + self.hidden]
    }

    /// `h_T` of one item.
    pub fn last(&self, item: usize) -> &[T] {
        self.state(item, self.steps - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub batch: usize,
    pub n_classes: usize,
    /// Pre-softmax activations, `[batch][class]`.
    pub logits: Vec<T>,
    pub log_probs: Vec<T>,
    /// `None` for the flatten head.
    pub hidden: Option<HiddenTrace<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn logits_of(&self, item: usize) -> &[T] {
        &self.logits[item * self.n_classes..(item + 1) * self.n_classes]
    }

    pub fn log_probs_of(&self, item: usize) -> &[T] {
        &self.log_probs[item * self.n_classes..(item + 1) * self.n_classes]
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|i| {
                let row = self.logits_of(i);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect()
    }

    fn concat(parts: Vec<ForwardOutput<T>>, n_classes: usize) -> Self {
        let batch = parts.len();
        let mut out = ForwardOutput {
            batch,
            n_classes,
            logits: Vec::new(),
            log_probs: Vec::new(),
            hidden: None,
        };
        for p in parts {
            out.logits.extend(p.logits);
            out.log_probs.extend(p.log_probs);
            if let Some(h) = p.hidden {
                let acc = out.hidden.get_or_insert(HiddenTrace {
                    steps: h.steps,
                    hidden: h.hidden,
                    values: Vec::new(),
                });
                acc.values.extend(h.values);
            }
        }
        out
    }
}

/// Activations saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    n: usize,
    block_inputs: Vec<Vec<T>>,
    norm: Vec<BnCache<T>>,
    masks: Vec<Option<Vec<T>>>,
    last_out: Vec<T>,
    pool_arg: Vec<u32>,
    pooled: Vec<T>,
    seq: Vec<SeqCache<T>>,
    head_in: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: ModelSpec,
    pub convs: Vec<Conv2d<T>>,
    pub norms: Vec<BatchNorm2d<T>>,
    pub lstm: Option<LstmParams<T>>,
    pub fc: Linear<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(&[seed, 0x1417]);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_c = 1;
        for (k, b) in spec.blocks.iter().enumerate() {
            convs.push(Conv2d::new(
                &format!("conv{}", k + 1),
                in_c,
                b.out_channels,
                spec.kernel,
                &mut rng,
            ));
            norms.push(BatchNorm2d::new(
                &format!("bn{}", k + 1),
                b.out_channels,
                spec.bn_momentum,
                spec.bn_eps,
            ));
            in_c = b.out_channels;
        }
        let lstm = match spec.head {
            Head::Lstm => {
                let (d, _) = spec.sequence_shape();
                Some(LstmParams::new("lstm", d, spec.hidden, spec.forget_bias, &mut rng))
            }
            Head::Flatten => None,
        };
        let fc = Linear::new("fc", spec.head_features(), spec.n_classes, &mut rng);
        Ok(Network {
            spec: spec.clone(),
            convs,
            norms,
            lstm,
            fc,
        })
    }

    /// Trainable parameters in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        for (c, b) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.extend(c.params_mut());
            out.extend(b.params_mut());
        }
        if let Some(l) = self.lstm.as_mut() {
            out.extend(l.params_mut());
        }
        out.extend(self.fc.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.norms) {
            out.extend([&c.weight, &c.bias, &b.gamma, &b.beta]);
        }
        if let Some(l) = &self.lstm {
            out.extend([&l.w_ih, &l.w_hh, &l.b_ih, &l.b_hh]);
        }
        out.extend([&self.fc.weight, &self.fc.bias]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            convs: self.convs.iter().map(Conv2d::cast).collect(),
            norms: self.norms.iter().map(BatchNorm2d::cast).collect(),
            lstm: self.lstm.as_ref().map(LstmParams::cast),
            fc: self.fc.cast(),
        }
    }

    fn check_batch(&self, batch: &[&[T]]) -> Result<()> {
        let want = self.spec.input_len();
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if let Some(bad) = batch.iter().find(|x| x.len() != want) {
            return Err(Error::Shape(format!(
                "input has {} values, expected 1×{}×{}",
                bad.len(),
                self.spec.input_height,
                self.spec.input_width
            )));
        }
        Ok(())
    }

    fn head(&self, pooled: &[T], n: usize) -> (Vec<T>, Option<HiddenTrace<T>>, Vec<SeqCache<T>>) {
        match &self.lstm {
            Some(lstm) => {
                let (d, steps) = self.spec.sequence_shape();
                let m = self.spec.hidden;
                let runs: Vec<(Vec<T>, SeqCache<T>)> = pooled
                    .par_chunks(d * steps)
                    .map(|x| forward_seq(lstm, x, steps))
                    .collect();
                let mut head_in = Vec::with_capacity(n * m);
                let mut values = Vec::with_capacity(n * steps * m);
                let mut caches = Vec::with_capacity(n);
                for (trace, cache) in runs {
                    head_in.extend_from_slice(&trace[(steps - 1) * m..]);
                    values.extend(trace);
                    caches.push(cache);
                }
                (
                    head_in,
                    Some(HiddenTrace {
                        steps,
                        hidden: m,
                        values,
                    }),
                    caches,
                )
            }
            None => (pooled.to_vec(), None, Vec::new()),
        }
    }

    pub fn forward_train(
        &mut self,
        batch: &[&[T]],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let n = batch.len();
        let (h, w) = (self.spec.input_height, self.spec.input_width);
        let mut x: Vec<T> = batch.iter().flat_map(|b| b.iter().copied()).collect();
        let mut block_inputs = Vec::with_capacity(self.convs.len());
        let mut norm = Vec::with_capacity(self.convs.len());
        let mut masks = Vec::with_capacity(self.convs.len());
        for l in 0..self.convs.len() {
            let z = self.convs[l].forward(&x, n, h, w);
            block_inputs.push(std::mem::take(&mut x));
            let (mut z, cache) = self.norms[l].forward_train(&z, n, h * w);
            norm.push(cache);
            relu_inplace(&mut z);
            let p = self.spec.blocks[l].dropout;
            let mask = match dropout.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let m: Vec<T> = dropout_mask(z.len(), p, rng);
                    z.iter_mut().zip(&m).for_each(|(v, k)| *v *= *k);
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            x = z;
        }
        let c = self.spec.last_channels();
        let (pooled, pool_arg) = maxpool_forward(&x, n, c, h, w, self.spec.pool);
        let (head_in, hidden, seq) = self.head(&pooled, n);
        let logits = self.fc.forward(&head_in, n);
        let k = self.spec.n_classes;
        let log_probs = log_softmax(&logits, k);
        let out = ForwardOutput {
            batch: n,
            n_classes: k,
            logits,
            log_probs,
            hidden,
        };
        let cache = ForwardCache {
            n,
            block_inputs,
            norm,
            masks,
            last_out: x,
            pool_arg,
            pooled,
            seq,
            head_in,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for `d loss / d logits`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_logits: &[T]) {
        let n = cache.n;
        let (h, w) = (self.spec.input_height, self.spec.input_width);
        let g_head = self.fc.backward(&cache.head_in, grad_logits, n);
        let g_pooled = match self.lstm.as_mut() {
            Some(lstm) => {
                let (d, steps) = self.spec.sequence_shape();
                let m = self.spec.hidden;
                let lstm_ref = &*lstm;
                let grads: Vec<_> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        backward_seq(
                            lstm_ref,
                            &cache.seq[i],
                            &cache.pooled[i * d * steps..(i + 1) * d * steps],
                            &g_head[i * m..(i + 1) * m],
                        )
                    })
                    .collect();
                let mut g_pooled = Vec::with_capacity(n * d * steps);
                for g in grads {
                    lstm.w_ih.grad.iter_mut().zip(&g.w_ih).for_each(|(a, b)| *a += *b);
                    lstm.w_hh.grad.iter_mut().zip(&g.w_hh).for_each(|(a, b)| *a += *b);
                    lstm.b_ih.grad.iter_mut().zip(&g.b).for_each(|(a, b)| *a += *b);
                    lstm.b_hh.grad.iter_mut().zip(&g.b).for_each(|(a, b)| *a += *b);
                    g_pooled.extend(g.dx);
                }
                g_pooled
            }
            None => g_head,
        };
        let mut g = maxpool_backward(&g_pooled, &cache.pool_arg, cache.last_out.len());
        for l in (0..self.convs.len()).rev() {
            let out = if l + 1 == self.convs.len() {
                &cache.last_out
            } else {
                &cache.block_inputs[l + 1]
            };
            if let Some(mask) = &cache.masks[l] {
                g.iter_mut().zip(mask).for_each(|(v, k)| *v *= *k);
            }
            relu_backward(out, &mut g);
            let gz = self.norms[l].backward(&cache.norm[l], &g, n, h * w);
            g = self.convs[l]
                .backward(&cache.block_inputs[l], &gz, n, h, w, l > 0)
                .unwrap_or_default();
        }
    }

    fn infer_one(&self, input: &[T]) -> Result<ForwardOutput<T>> {
        let (h, w) = (self.spec.input_height, self.spec.input_width);
        let mut x = input.to_vec();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            let z = conv.forward(&x, 1, h, w);
            x = bn.forward_eval(&z, 1, h * w)?;
            relu_inplace(&mut x);
        }
        let (pooled, _) = maxpool_forward(&x, 1, self.spec.last_channels(), h, w, self.spec.pool);
        let (head_in, hidden, _) = self.head(&pooled, 1);
        let logits = self.fc.forward(&head_in, 1);
        let k = self.spec.n_classes;
        let log_probs = log_softmax(&logits, k);
        Ok(ForwardOutput {
            batch: 1,
            n_classes: k,
            logits,
            log_probs,
            hidden,
        })
    }

    /// Replaces every batch-norm running statistic with the equally weighted
    /// average over `batches`, run in training mode without dropout. Adam
    /// moves scale-invariant convolution weights fast enough that momentum
    /// averages lag the final weights.
    pub fn recalibrate_norms<'a, I>(&mut self, batches: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<&'a [T]>>,
        T: 'a,
    {
        let momenta: Vec<f64> = self.norms.iter().map(|b| b.momentum).collect();
        let mut result = Ok(());
        for (k, batch) in batches.into_iter().enumerate() {
            self.norms.iter_mut().for_each(|b| b.momentum = 1.0 / (k + 1) as f64);
            if let Err(e) = self.forward_train(&batch, None) {
                result = Err(e);
                break;
            }
        }
        self.norms.iter_mut().zip(momenta).for_each(|(b, m)| b.momentum = m);
        result
    }

    /// Eval-mode forward. Items are independent (running statistics), so they
    /// are processed in parallel and the result never depends on batching.
    pub fn forward_eval(&self, batch: &[&[T]]) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        if self.norms.iter().any(|b| b.tracked == 0) {
            return Err(Error::UntrainedBatchNorm);
        }
        let parts = batch
            .par_iter()
            .map(|x| self.infer_one(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput::concat(parts, self.spec.n_classes))
    }
}

/// Forward pass in either mode. Training mode updates batch-norm running
/// statistics and draws dropout masks from `rng`.
pub fn forward<T: Scalar>(
    net: &mut Network<T>,
    batch: &[&[T]],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput<T>> {
    match mode {
        Mode::Train => net.forward_train(batch, Some(rng)).map(|(out, _)| out),
        Mode::Eval => net.forward_eval(batch),
    }
}
