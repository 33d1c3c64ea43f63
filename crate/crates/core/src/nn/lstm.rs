//! LSTM cell with separate input and recurrent biases:
//!
//! ```text
//! i = σ(W_ii x + b_ii + W_hi h + b_hi)      f = σ(W_if x + b_if + W_hf h + b_hf)
//! g = tanh(W_ig x + b_ig + W_hg h + b_hg)   o = σ(W_io x + b_io + W_ho h + b_ho)
//! c' = f ⊙ c + i ⊙ g                        h' = o ⊙ tanh(c')
//! ```
//!
//! The four gate matrices are stacked in `i, f, g, o` order.

use rand_chacha::ChaCha8Rng;

use super::{axpy, dot, sigmoid, Param, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Cell,
    Output,
}

impl Gate {
    fn index(self) -> usize {
        match self {
            Gate::Input => 0,
            Gate::Forget => 1,
            Gate::Cell => 2,
            Gate::Output => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    /// `[4M, D]`
    pub w_ih: Param<T>,
    /// `[4M, M]`
    pub w_hh: Param<T>,
    pub b_ih: Param<T>,
    pub b_hh: Param<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

/// Gate activations of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates<T> {
    pub i: Vec<T>,
    pub f: Vec<T>,
    pub g: Vec<T>,
    pub o: Vec<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(name: &str, input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Param::zeros(format!("{name}.w_ih"), &[4 * hidden, input]),
            w_hh: Param::zeros(format!("{name}.w_hh"), &[4 * hidden, hidden]),
            b_ih: Param::zeros(format!("{name}.b_ih"), &[4 * hidden]),
            b_hh: Param::zeros(format!("{name}.b_hh"), &[4 * hidden]),
        }
    }

    /// Uniform `±1/√M` weights, zero biases except `forget_bias` on `b_if`.
    pub fn new(name: &str, input: usize, hidden: usize, forget_bias: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let mut p = Self::zeros(name, input, hidden);
        let bound = 1.0 / (hidden as f64).sqrt();
        for v in p.w_ih.value.iter_mut().chain(p.w_hh.value.iter_mut()) {
            *v = T::of(rng.random_range(-bound..bound));
        }
        p.b_ih.value[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = T::of(forget_bias));
        p
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape[1]
    }

    /// `W_i?` rows of one gate, `[M, D]`.
    pub fn input_weights(&self, gate: Gate) -> &[T] {
        let (m, d) = (self.hidden_size(), self.input_size());
        &self.w_ih.value[gate.index() * m * d..(gate.index() + 1) * m * d]
    }

    /// `W_h?` rows of one gate, `[M, M]`.
    pub fn hidden_weights(&self, gate: Gate) -> &[T] {
        let m = self.hidden_size();
        &self.w_hh.value[gate.index() * m * m..(gate.index() + 1) * m * m]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }

    pub fn cast<U: Scalar>(&self) -> LstmParams<U> {
        LstmParams {
            w_ih: self.w_ih.cast(),
            w_hh: self.w_hh.cast(),
            b_ih: self.b_ih.cast(),
            b_hh: self.b_hh.cast(),
        }
    }

    fn preactivation(&self, zx: impl Fn(usize) -> T, h: &[T]) -> Vec<T> {
        let m = self.hidden_size();
        (0..4 * m)
            .map(|g| zx(g) + self.b_ih.value[g] + self.b_hh.value[g] + dot(&self.w_hh.value[g * m..(g + 1) * m], h))
            .collect()
    }
}

/// Activates a stacked pre-activation in place; returns `c'`, `tanh(c')`, `h'`.
fn activate<T: Scalar>(z: &mut [T], c_prev: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = c_prev.len();
    for (k, v) in z.iter_mut().enumerate() {
        *v = if k / m == 2 { v.tanh() } else { sigmoid(*v) };
    }
    let (i, rest) = z.split_at(m);
    let (f, rest) = rest.split_at(m);
    let (g, o) = rest.split_at(m);
    let c: Vec<T> = (0..m).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tc: Vec<T> = c.iter().map(|v| v.tanh()).collect();
    let h = (0..m).map(|k| o[k] * tc[k]).collect();
    (c, tc, h)
}

pub fn lstm_step<T: Scalar>(params: &LstmParams<T>, x: &[T], state: &LstmState<T>) -> Result<(LstmState<T>, Gates<T>)> {
    let (d, m) = (params.input_size(), params.hidden_size());
    if x.len() != d || state.h.len() != m || state.c.len() != m {
        return Err(Error::Shape(format!(
            "lstm_step expects x[{d}], h[{m}], c[{m}]; got x[{}], h[{}], c[{}]",
            x.len(),
            state.h.len(),
            state.c.len()
        )));
    }
    let mut z = params.preactivation(|g| dot(&params.w_ih.value[g * d..(g + 1) * d], x), &state.h);
    let (c, _, h) = activate(&mut z, &state.c);
    let gates = Gates {
        i: z[..m].to_vec(),
        f: z[m..2 * m].to_vec(),
        g: z[2 * m..3 * m].to_vec(),
        o: z[3 * m..].to_vec(),
    };
    Ok((LstmState { h, c }, gates))
}

/// Saved activations of one sequence for BPTT.
#[derive(Debug, Clone)]
pub(crate) struct SeqCache<T> {
    steps: usize,
    /// `[T][4M]`, post-activation.
    gates: Vec<T>,
    /// `[T][M]`
    c: Vec<T>,
    tanh_c: Vec<T>,
    /// `[M][T]`: column `t` is `h_{t-1}`.
    h_prev_t: Vec<T>,
}

pub(crate) struct SeqGrads<T> {
    pub w_ih: Vec<T>,
    pub w_hh: Vec<T>,
    pub b: Vec<T>,
    /// `[D][T]`
    pub dx: Vec<T>,
}

/// Runs a whole sequence. `x` is `[D][T]` (feature-major, as it comes out of
/// the pooled feature map). Returns the hidden trace `[T][M]`.
pub(crate) fn forward_seq<T: Scalar>(p: &LstmParams<T>, x: &[T], steps: usize) -> (Vec<T>, SeqCache<T>) {
    let (d, m) = (p.input_size(), p.hidden_size());
    debug_assert_eq!(x.len(), d * steps);
    let mut zx = vec![T::zero(); 4 * m * steps];
    for g in 0..4 * m {
        let row = &mut zx[g * steps..(g + 1) * steps];
        for k in 0..d {
            axpy(p.w_ih.value[g * d + k], &x[k * steps..(k + 1) * steps], row);
        }
    }
    let mut trace = Vec::with_capacity(steps * m);
    let mut cache = SeqCache {
        steps,
        gates: Vec::with_capacity(steps * 4 * m),
        c: Vec::with_capacity(steps * m),
        tanh_c: Vec::with_capacity(steps * m),
        h_prev_t: vec![T::zero(); m * steps],
    };
    let mut h = vec![T::zero(); m];
    let mut c = vec![T::zero(); m];
    for t in 0..steps {
        for (k, &hk) in h.iter().enumerate() {
            cache.h_prev_t[k * steps + t] = hk;
        }
        let mut z = p.preactivation(|g| zx[g * steps + t], &h);
        let (c_new, tc, h_new) = activate(&mut z, &c);
        cache.gates.extend_from_slice(&z);
        cache.c.extend_from_slice(&c_new);
        cache.tanh_c.extend_from_slice(&tc);
        trace.extend_from_slice(&h_new);
        h = h_new;
        c = c_new;
    }
    (trace, cache)
}

/// Backpropagates a gradient on the final hidden state through the sequence.
pub(crate) fn backward_seq<T: Scalar>(p: &LstmParams<T>, cache: &SeqCache<T>, x: &[T], dh_last: &[T]) -> SeqGrads<T> {
    let (d, m) = (p.input_size(), p.hidden_size());
    let steps = cache.steps;
    let mut dz_all = vec![T::zero(); 4 * m * steps];
    let mut dh = dh_last.to_vec();
    let mut dc = vec![T::zero(); m];
    let one = T::one();
    for t in (0..steps).rev() {
        let gates = &cache.gates[t * 4 * m..(t + 1) * 4 * m];
        let tc = &cache.tanh_c[t * m..(t + 1) * m];
        let mut dz = vec![T::zero(); 4 * m];
        for k in 0..m {
            let (i, f, g, o) = (gates[k], gates[m + k], gates[2 * m + k], gates[3 * m + k]);
            let c_prev = if t > 0 { cache.c[(t - 1) * m + k] } else { T::zero() };
            let d_o = dh[k] * tc[k];
            dc[k] += dh[k] * o * (one - tc[k] * tc[k]);
            dz[k] = dc[k] * g * i * (one - i);
            dz[m + k] = dc[k] * c_prev * f * (one - f);
            dz[2 * m + k] = dc[k] * i * (one - g * g);
            dz[3 * m + k] = d_o * o * (one - o);
            dc[k] *= f;
        }
        let mut dh_prev = vec![T::zero(); m];
        for (g, &dzg) in dz.iter().enumerate() {
            dz_all[g * steps + t] = dzg;
            axpy(dzg, &p.w_hh.value[g * m..(g + 1) * m], &mut dh_prev);
        }
        dh = dh_prev;
    }

    let mut w_ih = vec![T::zero(); 4 * m * d];
    let mut w_hh = vec![T::zero(); 4 * m * m];
    let mut b = vec![T::zero(); 4 * m];
    let mut dx = vec![T::zero(); d * steps];
    for g in 0..4 * m {
        let dzg = &dz_all[g * steps..(g + 1) * steps];
        b[g] = dzg.iter().copied().sum();
        for k in 0..d {
            w_ih[g * d + k] = dot(dzg, &x[k * steps..(k + 1) * steps]);
            axpy(p.w_ih.value[g * d + k], dzg, &mut dx[k * steps..(k + 1) * steps]);
        }
        for k in 0..m {
            w_hh[g * m + k] = dot(dzg, &cache.h_prev_t[k * steps..(k + 1) * steps]);
        }
    }
    SeqGrads { w_ih, w_hh, b, dx }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn zero_params_zero_state() {
        let p = LstmParams::<f64>::zeros("l", 3, 4);
        let (s, gates) = lstm_step(&p, &[0.3, -1.0, 2.0], &LstmState::zeros(4)).unwrap();
        assert!(gates.i.iter().chain(&gates.f).chain(&gates.o).all(|&v| v == 0.5));
        assert!(gates.g.iter().all(|&v| v == 0.0));
        assert!(s.c.iter().chain(&s.h).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_unit_cell() {
        let p = LstmParams::<f64>::zeros("l", 2, 3);
        let state = LstmState {
            h: vec![0.0; 3],
            c: vec![1.0; 3],
        };
        let (s, _) = lstm_step(&p, &[0.0, 0.0], &state).unwrap();
        let expected_h = 0.5 * 0.5f64.tanh();
        for k in 0..3 {
            assert_eq!(s.c[k], 0.5);
            assert!((s.h[k] - expected_h).abs() < 1e-15);
        }
        assert!((expected_h - 0.2311).abs() < 1e-4);
    }

    #[test]
    fn shape_errors() {
        let p = LstmParams::<f64>::zeros("l", 2, 3);
        assert!(lstm_step(&p, &[0.0; 3], &LstmState::zeros(3)).is_err());
        assert!(lstm_step(&p, &[0.0; 2], &LstmState::zeros(2)).is_err());
    }

    #[test]
    fn gate_views_slice_the_stack() {
        let mut p = LstmParams::<f64>::zeros("l", 2, 3);
        p.w_ih.value.iter_mut().enumerate().for_each(|(k, v)| *v = k as f64);
        assert_eq!(p.input_weights(Gate::Forget)[0], 6.0);
        assert_eq!(p.hidden_weights(Gate::Output).len(), 9);
    }

    #[test]
    fn sequence_matches_repeated_steps() {
        let mut rng = rng_for(&[3]);
        let p = LstmParams::<f64>::new("l", 2, 3, 1.0, &mut rng);
        let steps = 5;
        let x: Vec<f64> = (0..2 * steps).map(|k| (k as f64 * 0.7).sin()).collect();
        let (trace, _) = forward_seq(&p, &x, steps);
        let mut state = LstmState::zeros(3);
        for t in 0..steps {
            let (s, _) = lstm_step(&p, &[x[t], x[steps + t]], &state).unwrap();
            for k in 0..3 {
                assert!((s.h[k] - trace[t * 3 + k]).abs() < 1e-14);
            }
            state = s;
        }
    }
}
