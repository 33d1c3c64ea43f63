//! Synthetic transmitters with per-device hardware impairments.
//!
//! Each device emits repeated QPSK frames (a fixed preamble followed by a
//! random payload) through a fixed impairment chain:
//!
//! 1. memoryless cubic PA nonlinearity `y = x (1 + a |x|²)`
//! 2. IQ gain/phase imbalance `I' = I`, `Q' = g (Q cos φ + I sin φ)`
//! 3. DC offset
//! 4. carrier frequency offset rotation
//! 5. phase-noise random walk
//! 6. AWGN at the configured SNR, measured against the impaired signal power
//!
//! Device parameters are drawn around a nominal value with a spread that
//! scales linearly with `separability`; at zero every device is identical.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataio::{write_capture, Capture, CaptureSource, Dataset, ManifestEntry, MIN_CAPTURE_SAMPLES};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const SAMPLES_PER_SYMBOL: usize = 8;
pub const PREAMBLE_SYMBOLS: usize = 12;
pub const PAYLOAD_SYMBOLS: usize = 20;
pub const FRAME_SAMPLES: usize = (PREAMBLE_SYMBOLS + PAYLOAD_SYMBOLS) * SAMPLES_PER_SYMBOL;

const PREAMBLE_SEED: u64 = 0x0050_5245_414D_424C;

/// Nominal value and per-unit-separability standard deviation of each
/// impairment parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterPrior {
    pub gain_imbalance_db: (f64, f64),
    pub phase_error_rad: (f64, f64),
    pub dc_offset: (f64, f64),
    pub cfo_hz: (f64, f64),
    /// Log-normal: `sigma = nominal * exp(separability * spread * z)`.
    pub phase_noise_sigma: (f64, f64),
    pub pa_cubic: (f64, f64),
}

pub const DEFAULT_PRIOR: ParameterPrior = ParameterPrior {
    gain_imbalance_db: (0.0, 2.0),
    phase_error_rad: (0.0, 0.08),
    dc_offset: (0.0, 0.2),
    cfo_hz: (0.0, 2000.0),
    phase_noise_sigma: (1e-2, 0.7),
    pa_cubic: (-0.05, 0.04),
};

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device_id: u32,
    pub iq_gain_imbalance_db: f64,
    pub quadrature_phase_error: f64,
    pub dc_offset: Complex64,
    pub carrier_freq_offset_hz: f64,
    pub phase_noise_sigma: f64,
    pub pa_cubic_coeff: f64,
}

impl DeviceProfile {
    /// A transmitter with no impairments at all.
    pub fn ideal(device_id: u32) -> Self {
        DeviceProfile {
            device_id,
            iq_gain_imbalance_db: 0.0,
            quadrature_phase_error: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            carrier_freq_offset_hz: 0.0,
            phase_noise_sigma: 0.0,
            pa_cubic_coeff: 0.0,
        }
    }

    pub fn parameters(&self) -> [f64; 7] {
        [
            self.iq_gain_imbalance_db,
            self.quadrature_phase_error,
            self.dc_offset.re,
            self.dc_offset.im,
            self.carrier_freq_offset_hz,
            self.phase_noise_sigma,
            self.pa_cubic_coeff,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Config(format!(
                "device {} has non-finite impairments",
                self.device_id
            )));
        }
        if self.phase_noise_sigma < 0.0 {
            return Err(Error::Config("phase_noise_sigma must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Short hex hash of the parameter bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.device_id.to_le_bytes());
        for p in self.parameters() {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_devices: usize,
    pub capture_seconds: f64,
    pub sample_rate_hz: f64,
    /// `f64::INFINITY` disables the noise stage.
    pub snr_db: f64,
    pub separability: f64,
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_devices: 15,
            capture_seconds: 0.5,
            sample_rate_hz: 1e6,
            snr_db: 25.0,
            separability: 1.0,
            master_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_samples(&self) -> usize {
        (self.capture_seconds * self.sample_rate_hz).round().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_devices < 2 {
            return Err(Error::TooFewDevices(self.n_devices));
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(Error::Config(format!(
                "separability {} outside [0, 1]",
                self.separability
            )));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Config("sample_rate_hz must be positive".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("snr_db is NaN".into()));
        }
        let n = self.n_samples();
        if n < MIN_CAPTURE_SAMPLES {
            return Err(Error::CaptureTooShort {
                n_samples: n,
                min: MIN_CAPTURE_SAMPLES,
            });
        }
        Ok(())
    }
}

pub fn make_device_profile(device_id: u32, master_seed: u64, separability: f64) -> DeviceProfile {
    make_device_profile_with(device_id, master_seed, separability, &DEFAULT_PRIOR)
}

pub fn make_device_profile_with(
    device_id: u32,
    master_seed: u64,
    separability: f64,
    prior: &ParameterPrior,
) -> DeviceProfile {
    let mut rng = rng_for(&[master_seed, 0xDE71CE, device_id as u64]);
    let mut draw = |(nominal, spread): (f64, f64)| {
        let z: f64 = rng.sample(StandardNormal);
        nominal + separability * spread * z
    };
    let iq_gain_imbalance_db = draw(prior.gain_imbalance_db);
    let quadrature_phase_error = draw(prior.phase_error_rad);
    let dc_offset = Complex64::new(draw(prior.dc_offset), draw(prior.dc_offset));
    let carrier_freq_offset_hz = draw(prior.cfo_hz);
    let (pn_nominal, pn_spread) = prior.phase_noise_sigma;
    let phase_noise_sigma = pn_nominal * draw((0.0, pn_spread)).exp();
    let pa_cubic_coeff = draw(prior.pa_cubic);
    DeviceProfile {
        device_id,
        iq_gain_imbalance_db,
        quadrature_phase_error,
        dc_offset,
        carrier_freq_offset_hz,
        phase_noise_sigma,
        pa_cubic_coeff,
    }
}

fn qpsk_symbol(bits: u32) -> Complex64 {
    let re = if bits & 1 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    let im = if bits & 2 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    Complex64::new(re, im)
}

/// The fixed preamble shared by every device, one entry per symbol.
pub fn preamble() -> Vec<Complex64> {
    let mut rng = rng_for(&[PREAMBLE_SEED]);
    (0..PREAMBLE_SYMBOLS)
        .map(|_| qpsk_symbol(rng.random_range(0..4)))
        .collect()
}

/// Unit-power rectangular-pulse QPSK frames, truncated to `n_samples`.
pub fn ideal_baseband(n_samples: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let pre = preamble();
    let mut out = Vec::with_capacity(n_samples + FRAME_SAMPLES);
    while out.len() < n_samples {
        for s in &pre {
            out.extend(std::iter::repeat_n(*s, SAMPLES_PER_SYMBOL));
        }
        for _ in 0..PAYLOAD_SYMBOLS {
            let s = qpsk_symbol(rng.random_range(0..4));
            out.extend(std::iter::repeat_n(s, SAMPLES_PER_SYMBOL));
        }
    }
    out.truncate(n_samples);
    out
}

/// Runs the impairment chain in place. Noise draws come after phase-noise
/// draws, so the noiseless and noisy outputs share their signal component
/// for a given `rng` state.
pub fn apply_impairments(
    profile: &DeviceProfile,
    sample_rate_hz: f64,
    snr_db: f64,
    signal: &mut [Complex64],
    rng: &mut ChaCha8Rng,
) {
    let gain = 10f64.powf(profile.iq_gain_imbalance_db / 20.0);
    let (sin_phi, cos_phi) = profile.quadrature_phase_error.sin_cos();
    let step = 2.0 * PI * profile.carrier_freq_offset_hz / sample_rate_hz;

    for (n, x) in signal.iter_mut().enumerate() {
        let mut y = *x * (1.0 + profile.pa_cubic_coeff * x.norm_sqr());
        y = Complex64::new(y.re, gain * (y.im * cos_phi + y.re * sin_phi));
        y += profile.dc_offset;
        if step != 0.0 {
            y *= Complex64::from_polar(1.0, step * n as f64);
        }
        *x = y;
    }

    if profile.phase_noise_sigma > 0.0 {
        let mut theta = 0.0f64;
        for x in signal.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            theta += profile.phase_noise_sigma * z;
            *x *= Complex64::from_polar(1.0, theta);
        }
    }

    if snr_db.is_finite() && !signal.is_empty() {
        let power = signal.iter().map(|x| x.norm_sqr()).sum::<f64>() / signal.len() as f64;
        let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
        for x in signal.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *x += Complex64::new(sigma * re, sigma * im);
        }
    }
}

fn session_rng(profile: &DeviceProfile, master_seed: u64, session_seed: u64) -> ChaCha8Rng {
    rng_for(&[master_seed, 0x5E55_1011, session_seed, profile.device_id as u64])
}

/// Generates one capture, in `f64` until the final rounding to `f32`.
pub fn synthesize_capture(profile: &DeviceProfile, config: &SynthConfig, session_seed: u64) -> Result<Capture> {
    profile.validate()?;
    let n = config.n_samples();
    if n < MIN_CAPTURE_SAMPLES {
        return Err(Error::CaptureTooShort {
            n_samples: n,
            min: MIN_CAPTURE_SAMPLES,
        });
    }
    let mut rng = session_rng(profile, config.master_seed, session_seed);
    let mut signal = ideal_baseband(n, &mut rng);
    apply_impairments(profile, config.sample_rate_hz, config.snr_db, &mut signal, &mut rng);
    let samples = signal
        .iter()
        .map(|x| Complex32::new(x.re as f32, x.im as f32))
        .collect();
    Ok(Capture {
        device_id: profile.device_id,
        sample_rate_hz: config.sample_rate_hz,
        samples,
        source: CaptureSource::Synthetic,
        generator_seed: Some(config.master_seed),
        impairment_digest: Some(profile.digest()),
    })
}

pub fn capture_file_name(device_id: u32) -> String {
    format!("device_{device_id:03}.iq")
}

/// Writes one capture per device plus the manifest into `dir` (created if
/// absent). Devices are generated in parallel from independent streams.
pub fn synthesize_dataset(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<Dataset> {
    config.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let entries = (0..config.n_devices as u32)
        .into_par_iter()
        .map(|id| {
            let profile = make_device_profile(id, config.master_seed, config.separability);
            let capture = synthesize_capture(&profile, config, 0)?;
            let name = capture_file_name(id);
            write_capture(&capture, dir.join(&name))?;
            Ok(ManifestEntry {
                device_id: id,
                path: name.into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset {
        root: dir.to_path_buf(),
        entries,
    };
    dataset.write_manifest()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn quiet(n_devices: usize) -> SynthConfig {
        SynthConfig {
            n_devices,
            snr_db: f64::INFINITY,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_separability_gives_identical_profiles() {
        let a = make_device_profile(1, 42, 0.0);
        let b = make_device_profile(9, 42, 0.0);
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn profiles_are_deterministic() {
        assert_eq!(make_device_profile(4, 7, 0.6), make_device_profile(4, 7, 0.6));
    }

    #[test]
    fn fifteen_devices_are_pairwise_distinct() {
        let profiles: Vec<_> = (0..15).map(|id| make_device_profile(id, 3, 1.0)).collect();
        let mut pairs = 0;
        for i in 0..15 {
            for j in i + 1..15 {
                assert_ne!(profiles[i].parameters(), profiles[j].parameters());
                pairs += 1;
            }
        }
        assert_eq!(pairs, 105);
    }

    #[test]
    fn identity_chain_is_ideal_qpsk() {
        let cfg = SynthConfig {
            capture_seconds: 0.01,
            ..quiet(2)
        };
        let cap = synthesize_capture(&DeviceProfile::ideal(0), &cfg, 3).unwrap();
        let mut rng = session_rng(&DeviceProfile::ideal(0), cfg.master_seed, 3);
        let ideal = ideal_baseband(cfg.n_samples(), &mut rng);
        assert_eq!(cap.samples.len(), ideal.len());
        for (a, b) in cap.samples.iter().zip(&ideal) {
            assert_eq!(a.re, b.re as f32);
            assert_eq!(a.im, b.im as f32);
        }
    }

    #[test]
    fn dc_offset_shifts_the_mean() {
        let profile = DeviceProfile {
            dc_offset: Complex64::new(0.1, 0.0),
            ..DeviceProfile::ideal(0)
        };
        let mut rng = rng_for(&[1]);
        let mut sig = ideal_baseband(200_000, &mut rng);
        apply_impairments(&profile, 1e6, f64::INFINITY, &mut sig, &mut rng);
        let n = sig.len() as f64;
        let ideal_mean: Complex64 = {
            let mut rng = rng_for(&[1]);
            ideal_baseband(200_000, &mut rng).iter().sum::<Complex64>() / n
        };
        let mean = sig.iter().sum::<Complex64>() / n - ideal_mean;
        assert!((mean.re - 0.1).abs() < 1e-6, "{mean}");
        assert!(mean.im.abs() < 1e-6, "{mean}");
    }

    #[test]
    fn cfo_advances_phase_per_sample() {
        let profile = DeviceProfile {
            carrier_freq_offset_hz: 1000.0,
            ..DeviceProfile::ideal(0)
        };
        let mut sig = vec![Complex64::new(1.0, 0.0); 10_000];
        let mut rng = rng_for(&[2]);
        apply_impairments(&profile, 1e6, f64::INFINITY, &mut sig, &mut rng);
        let expected = 2.0 * PI * 1e-3;
        for w in sig.windows(2) {
            let inc = (w[1] * w[0].conj()).arg();
            assert!((inc - expected).abs() < 1e-6, "{inc}");
        }
    }

    #[test]
    fn snr_is_calibrated() {
        let profile = make_device_profile(2, 5, 1.0);
        for snr in [0.0, 10.0, 25.0] {
            let mut clean = ideal_baseband(100_000, &mut rng_for(&[9]));
            let mut noisy = clean.clone();
            apply_impairments(&profile, 1e6, f64::INFINITY, &mut clean, &mut rng_for(&[10]));
            apply_impairments(&profile, 1e6, snr, &mut noisy, &mut rng_for(&[10]));
            let ps: f64 = clean.iter().map(|x| x.norm_sqr()).sum();
            let pn: f64 = noisy.iter().zip(&clean).map(|(a, b)| (a - b).norm_sqr()).sum();
            let measured = 10.0 * (ps / pn).log10();
            assert!((measured - snr).abs() < 0.5, "target {snr} dB, measured {measured} dB");
        }
    }

    #[test]
    fn dataset_shape_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_devices: 3,
            capture_seconds: 0.01,
            ..SynthConfig::default()
        };
        let ds = synthesize_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(ds.device_ids(), vec![0, 1, 2]);

        let err = synthesize_dataset(
            &SynthConfig {
                n_devices: 1,
                ..cfg.clone()
            },
            dir.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("need ≥ 2 devices"), "{err}");

        let err = synthesize_dataset(
            &SynthConfig {
                capture_seconds: 1e-3,
                ..cfg
            },
            dir.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("capture too short"), "{err}");
    }

    #[test]
    fn half_second_gives_244_slices() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.n_samples() / 2048, 244);
    }
}
