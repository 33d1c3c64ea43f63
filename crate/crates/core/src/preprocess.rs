//! Captures → 2048-sample slices → per-channel autocorrelation features.
//!
//! A slice's I and Q channels are each correlated with themselves at lags
//! 0‥2047. The correlation is computed as a 4096-point zero-padded circular
//! correlation via FFT; keeping the first 2048 columns gives exactly the
//! one-sided linear autocorrelation `r[ℓ] = Σ_{t<2048-ℓ} x[t]·x[t+ℓ]`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::dataio::{join_words, parse_words, read_container, write_container, Capture, Dataset, Header};
use crate::error::{Error, Result};
use crate::synth::{make_device_profile, synthesize_capture, SynthConfig};

pub const SLICE_LEN: usize = 2048;
pub const CHANNELS: usize = 2;
pub const FEATURE_LEN: usize = CHANNELS * SLICE_LEN;
const FFT_LEN: usize = 2 * SLICE_LEN;

#[derive(Debug, Clone, PartialEq)]
pub struct RawSlice {
    pub i: Vec<f64>,
    pub q: Vec<f64>,
    pub device_id: u32,
    pub slice_index: usize,
}

/// Row 0 holds the I autocorrelation, row 1 the Q autocorrelation
/// (row-major, `2 × 2048`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSlice {
    pub features: Vec<f32>,
    pub device_id: u32,
    pub slice_index: usize,
}

impl FeatureSlice {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.features[r * SLICE_LEN..(r + 1) * SLICE_LEN]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Plain lagged sum.
    #[default]
    Raw,
    /// Divided by the slice length.
    Biased,
    /// Divided by the number of overlapping terms, `2048 − ℓ`.
    Unbiased,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Raw => "raw",
            Estimator::Biased => "biased",
            Estimator::Unbiased => "unbiased",
        })
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Estimator::Raw),
            "biased" => Ok(Estimator::Biased),
            "unbiased" => Ok(Estimator::Unbiased),
            other => Err(format!("unknown estimator {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    /// Divide both rows by `r_I[0] + r_Q[0]`.
    pub normalize: bool,
    pub estimator: Estimator,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            normalize: true,
            estimator: Estimator::Raw,
        }
    }
}

pub fn slice_capture(capture: &Capture) -> Result<Vec<RawSlice>> {
    let n = capture.samples.len();
    if n < SLICE_LEN {
        return Err(Error::CaptureTooShort {
            n_samples: n,
            min: SLICE_LEN,
        });
    }
    Ok(capture
        .samples
        .chunks_exact(SLICE_LEN)
        .enumerate()
        .map(|(k, chunk)| RawSlice {
            i: chunk.iter().map(|s| s.re as f64).collect(),
            q: chunk.iter().map(|s| s.im as f64).collect(),
            device_id: capture.device_id,
            slice_index: k,
        })
        .collect())
}

/// Reusable FFT plans for 2048-lag autocorrelation.
pub struct Autocorrelator {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Default for Autocorrelator {
    fn default() -> Self {
        Self::new()
    }
}

impl Autocorrelator {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Autocorrelator {
            forward: planner.plan_fft_forward(FFT_LEN),
            inverse: planner.plan_fft_inverse(FFT_LEN),
        }
    }

    pub fn autocorrelate(&self, channel: &[f64]) -> Result<Vec<f64>> {
        if channel.len() != SLICE_LEN {
            return Err(Error::WrongLength {
                expected: SLICE_LEN,
                found: channel.len(),
            });
        }
        if let Some(index) = channel.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(self.pair(channel, channel).0)
    }

    /// Autocorrelates two real channels with one complex transform: packs
    /// `z = x + j·y`, then separates the spectra by conjugate symmetry.
    fn pair(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut buf = vec![Complex64::new(0.0, 0.0); FFT_LEN];
        for (t, (a, b)) in x.iter().zip(y).enumerate() {
            buf[t] = Complex64::new(*a, *b);
        }
        self.forward.process(&mut buf);
        // |X|² + j|Y|² is the spectrum of (r_x + j r_y), both real sequences.
        let mut spec = vec![Complex64::new(0.0, 0.0); FFT_LEN];
        for k in 0..FFT_LEN {
            let zk = buf[k];
            let zc = buf[(FFT_LEN - k) % FFT_LEN].conj();
            let xk = (zk + zc) * 0.5;
            let yk = (zk - zc) * Complex64::new(0.0, -0.5);
            spec[k] = Complex64::new(xk.norm_sqr(), yk.norm_sqr());
        }
        self.inverse.process(&mut spec);
        let scale = 1.0 / FFT_LEN as f64;
        let rx = spec[..SLICE_LEN].iter().map(|c| c.re * scale).collect();
        let ry = spec[..SLICE_LEN].iter().map(|c| c.im * scale).collect();
        (rx, ry)
    }

    pub fn featurize(&self, slice: &RawSlice, config: &FeatureConfig) -> Result<FeatureSlice> {
        for ch in [&slice.i, &slice.q] {
            if ch.len() != SLICE_LEN {
                return Err(Error::WrongLength {
                    expected: SLICE_LEN,
                    found: ch.len(),
                });
            }
            if let Some(index) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        let (mut ri, mut rq) = self.pair(&slice.i, &slice.q);
        // The FFT path can leave round-off where the exact value is 0.
        clean_lag_zero(&slice.i, &mut ri);
        clean_lag_zero(&slice.q, &mut rq);
        for r in [&mut ri, &mut rq] {
            match config.estimator {
                Estimator::Raw => {}
                Estimator::Biased => r.iter_mut().for_each(|v| *v /= SLICE_LEN as f64),
                Estimator::Unbiased => r.iter_mut().enumerate().for_each(|(l, v)| *v /= (SLICE_LEN - l) as f64),
            }
        }
        if config.normalize {
            let energy = ri[0] + rq[0];
            if energy <= 0.0 {
                return Err(Error::DegenerateSlice {
                    device_id: slice.device_id,
                    slice_index: slice.slice_index,
                });
            }
            ri.iter_mut().chain(rq.iter_mut()).for_each(|v| *v /= energy);
        }
        let features = ri.iter().chain(&rq).map(|&v| v as f32).collect();
        Ok(FeatureSlice {
            features,
            device_id: slice.device_id,
            slice_index: slice.slice_index,
        })
    }
}

fn clean_lag_zero(x: &[f64], r: &mut [f64]) {
    r[0] = x.iter().map(|v| v * v).sum();
}

/// Linear autocorrelation at lags 0‥2047 of one 2048-sample channel.
pub fn autocorrelate(channel: &[f64]) -> Result<Vec<f64>> {
    Autocorrelator::new().autocorrelate(channel)
}

pub fn featurize(slice: &RawSlice, config: &FeatureConfig) -> Result<FeatureSlice> {
    Autocorrelator::new().featurize(slice, config)
}

/// Featurized slices of every device, truncated to a common per-device count
/// and ordered by `(device_id, slice_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    pub slices: Vec<FeatureSlice>,
    pub config: FeatureConfig,
}

impl SliceDataset {
    pub fn device_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.slices.iter().map(|s| s.device_id).collect();
        ids.dedup();
        ids
    }

    pub fn per_device(&self) -> usize {
        let ids = self.device_ids();
        if ids.is_empty() {
            0
        } else {
            self.slices.len() / ids.len()
        }
    }

    pub fn of_device(&self, device_id: u32) -> impl Iterator<Item = &FeatureSlice> {
        self.slices.iter().filter(move |s| s.device_id == device_id)
    }

    /// Groups already-featurized slices, enforcing equal counts per device.
    pub fn from_slices(slices: Vec<FeatureSlice>, config: FeatureConfig) -> Result<Self> {
        let mut by_device: BTreeMap<u32, Vec<FeatureSlice>> = BTreeMap::new();
        for s in slices {
            by_device.entry(s.device_id).or_default().push(s);
        }
        if by_device.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some((&id, _)) = by_device.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::NoValidSlices(id));
        }
        let keep = by_device.values().map(Vec::len).min().unwrap_or(0);
        let mut out = Vec::with_capacity(keep * by_device.len());
        for (id, mut v) in by_device {
            if v.len() > keep {
                log::info!("device {id}: truncating {} slices to {keep}", v.len());
            }
            v.sort_by_key(|s| s.slice_index);
            v.truncate(keep);
            out.extend(v);
        }
        Ok(SliceDataset { slices: out, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut h = Header::new("features");
        h.push("version", 1)
            .push("n_slices", self.slices.len())
            .push("channels", CHANNELS)
            .push("lags", SLICE_LEN)
            .push("normalized", self.config.normalize)
            .push("estimator", self.config.estimator)
            .push("device_ids", join_words(self.slices.iter().map(|s| s.device_id)))
            .push("slice_indices", join_words(self.slices.iter().map(|s| s.slice_index)));
        let blob: Vec<f32> = self.slices.iter().flat_map(|s| s.features.iter().copied()).collect();
        write_container(path, &h, &blob)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (h, blob) = read_container(path)?;
        let bad = |r: String| Error::format(path, r);
        if h.kind != "features" {
            return Err(bad(format!("expected a feature cache, found {:?}", h.kind)));
        }
        let n: usize = h.parse("n_slices").map_err(bad)?;
        let channels: usize = h.parse("channels").map_err(bad)?;
        let lags: usize = h.parse("lags").map_err(bad)?;
        if channels != CHANNELS || lags != SLICE_LEN {
            return Err(bad(format!("unsupported feature shape {channels}×{lags}")));
        }
        let config = FeatureConfig {
            normalize: h.parse("normalized").map_err(bad)?,
            estimator: h.parse("estimator").map_err(bad)?,
        };
        let ids: Vec<u32> = parse_words(h.require("device_ids").map_err(bad)?).map_err(bad)?;
        let idx: Vec<usize> = parse_words(h.require("slice_indices").map_err(bad)?).map_err(bad)?;
        if ids.len() != n || idx.len() != n || blob.len() != n * FEATURE_LEN {
            return Err(Error::LengthMismatch(format!(
                "{}: header declares {n} slices, blob holds {} values",
                path.display(),
                blob.len()
            )));
        }
        let slices = blob
            .chunks_exact(FEATURE_LEN)
            .zip(ids.into_iter().zip(idx))
            .map(|(f, (device_id, slice_index))| FeatureSlice {
                features: f.to_vec(),
                device_id,
                slice_index,
            })
            .collect();
        Ok(SliceDataset { slices, config })
    }
}

fn featurize_captures(
    ac: &Autocorrelator,
    device_id: u32,
    captures: Vec<Capture>,
    config: &FeatureConfig,
) -> Result<Vec<FeatureSlice>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for cap in captures {
        let raw = slice_capture(&cap)?;
        let n = raw.len();
        for mut s in raw {
            s.slice_index += offset;
            match ac.featurize(&s, config) {
                Ok(f) => out.push(f),
                Err(e @ Error::DegenerateSlice { .. }) => log::warn!("skipping: {e}"),
                Err(e) => return Err(e),
            }
        }
        offset += n;
    }
    if out.is_empty() {
        return Err(Error::NoValidSlices(device_id));
    }
    Ok(out)
}

/// Slices and featurizes every capture of a dataset. Degenerate slices are
/// skipped with a warning; a device left with none is an error.
pub fn build_slice_dataset(dataset: &Dataset, config: &FeatureConfig) -> Result<SliceDataset> {
    let ids = dataset.device_ids();
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_device = ids
        .par_iter()
        .map(|&id| featurize_captures(&Autocorrelator::new(), id, dataset.captures_for(id)?, config))
        .collect::<Result<Vec<_>>>()?;
    SliceDataset::from_slices(per_device.into_iter().flatten().collect(), *config)
}

/// Synthesizes captures in memory and featurizes them; equivalent to
/// writing a synthetic dataset and running [`build_slice_dataset`] on it.
pub fn synthesize_features(synth: &SynthConfig, config: &FeatureConfig) -> Result<SliceDataset> {
    synth.validate()?;
    let per_device = (0..synth.n_devices as u32)
        .into_par_iter()
        .map(|id| {
            let profile = make_device_profile(id, synth.master_seed, synth.separability);
            let capture = synthesize_capture(&profile, synth, 0)?;
            featurize_captures(&Autocorrelator::new(), id, vec![capture], config)
        })
        .collect::<Result<Vec<_>>>()?;
    SliceDataset::from_slices(per_device.into_iter().flatten().collect(), *config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn capture(n: usize) -> Capture {
        Capture::new(1, 1e6, (0..n).map(|k| Complex32::new(k as f32, -(k as f32))).collect())
    }

    fn direct(x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|l| (0..x.len() - l).map(|t| x[t] * x[t + l]).sum())
            .collect()
    }

    #[test]
    fn slice_counts() {
        assert_eq!(slice_capture(&capture(4096)).unwrap().len(), 2);
        let s = slice_capture(&capture(5000)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].i[0], 2048.0);
        assert!(matches!(
            slice_capture(&capture(2047)),
            Err(Error::CaptureTooShort { .. })
        ));
    }

    #[test]
    fn slices_partition_the_prefix() {
        let cap = capture(3 * 2048 + 17);
        let joined: Vec<f64> = slice_capture(&cap).unwrap().iter().flat_map(|s| s.i.clone()).collect();
        let prefix: Vec<f64> = cap.samples[..3 * 2048].iter().map(|c| c.re as f64).collect();
        assert_eq!(joined, prefix);
    }

    #[test]
    fn zeros_and_impulse() {
        assert!(autocorrelate(&[0.0; SLICE_LEN]).unwrap().iter().all(|&v| v == 0.0));
        let mut imp = vec![0.0; SLICE_LEN];
        imp[0] = 1.0;
        let r = autocorrelate(&imp).unwrap();
        assert_eq!(r[0], 1.0);
        assert!(r[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn wrong_length() {
        let err = autocorrelate(&[1.0; 100]).unwrap_err();
        assert!(err.to_string().contains("expected 2048 samples"), "{err}");
    }

    #[test]
    fn fft_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..SLICE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = autocorrelate(&x).unwrap();
        let slow = direct(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-9 * slow[0]), "{a} vs {b}");
        }
    }

    #[test]
    fn impulse_on_i_only() {
        let mut i = vec![0.0; SLICE_LEN];
        i[0] = 1.0;
        let raw = RawSlice {
            i,
            q: vec![0.0; SLICE_LEN],
            device_id: 0,
            slice_index: 0,
        };
        let f = featurize(
            &raw,
            &FeatureConfig {
                normalize: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(f.row(0)[0], 1.0);
        assert!(f.row(0)[1..].iter().all(|v| v.abs() < 1e-6));
        assert!(f.row(1).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn degenerate_slice_with_normalization() {
        let raw = RawSlice {
            i: vec![0.0; SLICE_LEN],
            q: vec![0.0; SLICE_LEN],
            device_id: 4,
            slice_index: 2,
        };
        assert!(matches!(
            featurize(&raw, &FeatureConfig::default()),
            Err(Error::DegenerateSlice {
                device_id: 4,
                slice_index: 2
            })
        ));
    }

    #[test]
    fn unbiased_estimator_divides_by_overlap() {
        let raw = RawSlice {
            i: vec![1.0; SLICE_LEN],
            q: vec![0.5; SLICE_LEN],
            device_id: 0,
            slice_index: 0,
        };
        let f = featurize(
            &raw,
            &FeatureConfig {
                normalize: false,
                estimator: Estimator::Unbiased,
            },
        )
        .unwrap();
        assert!(f.row(0).iter().all(|v| (v - 1.0).abs() < 1e-5));
        assert!(f.row(1).iter().all(|v| (v - 0.25).abs() < 1e-5));
    }

    fn fs(device_id: u32, slice_index: usize) -> FeatureSlice {
        FeatureSlice {
            features: vec![0.0; FEATURE_LEN],
            device_id,
            slice_index,
        }
    }

    #[test]
    fn truncates_to_minimum() {
        let slices: Vec<_> = (0..250).map(|k| fs(0, k)).chain((0..244).map(|k| fs(1, k))).collect();
        let ds = SliceDataset::from_slices(slices, FeatureConfig::default()).unwrap();
        assert_eq!(ds.slices.len(), 488);
        assert_eq!(ds.per_device(), 244);
        assert_eq!(ds.device_ids(), vec![0, 1]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            SliceDataset::from_slices(vec![], FeatureConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = fs(3, 0);
        a.features[5] = 0.25;
        let ds = SliceDataset::from_slices(vec![a, fs(3, 1), fs(8, 0), fs(8, 1)], FeatureConfig::default()).unwrap();
        let path = dir.path().join("f.hnvf");
        ds.save(&path).unwrap();
        assert_eq!(SliceDataset::load(&path).unwrap(), ds);
    }
}
