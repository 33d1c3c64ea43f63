//! `.iq` payloads with `.meta` sidecars.
//!
//! The payload is raw interleaved little-endian `f32` pairs (I₀, Q₀, I₁, Q₁, …)
//! so it can be loaded directly by other signal tools. Everything else lives in
//! the key/value sidecar at `<payload>.meta`.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex32;

use crate::error::{Error, Result};

/// Minimum number of samples a capture must hold (one slice).
pub const MIN_CAPTURE_SAMPLES: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureSource {
    Synthetic,
    Imported,
}

impl fmt::Display for CaptureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaptureSource::Synthetic => "synthetic",
            CaptureSource::Imported => "imported",
        })
    }
}

impl FromStr for CaptureSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(CaptureSource::Synthetic),
            "imported" => Ok(CaptureSource::Imported),
            other => Err(format!("unknown capture source {other:?}")),
        }
    }
}

/// A complex baseband recording from one device.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub device_id: u32,
    pub sample_rate_hz: f64,
    pub samples: Vec<Complex32>,
    pub source: CaptureSource,
    pub generator_seed: Option<u64>,
    pub impairment_digest: Option<String>,
}

impl Capture {
    pub fn new(device_id: u32, sample_rate_hz: f64, samples: Vec<Complex32>) -> Self {
        Capture {
            device_id,
            sample_rate_hz,
            samples,
            source: CaptureSource::Imported,
            generator_seed: None,
            impairment_digest: None,
        }
    }

    pub fn meta(&self) -> CaptureMeta {
        CaptureMeta {
            device_id: self.device_id,
            sample_rate_hz: self.sample_rate_hz,
            n_samples: self.samples.len(),
            source: self.source,
            generator_seed: self.generator_seed,
            impairment_digest: self.impairment_digest.clone(),
        }
    }

    /// Checks the sample-rate and finiteness invariants. Length is checked by
    /// consumers that need whole slices.
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if let Some(index) = self
            .samples
            .iter()
            .position(|s| !(s.re.is_finite() && s.im.is_finite()))
        {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureMeta {
    pub device_id: u32,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub source: CaptureSource,
    pub generator_seed: Option<u64>,
    pub impairment_digest: Option<String>,
}

impl CaptureMeta {
    fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("device_id = {}\n", self.device_id));
        out.push_str(&format!("sample_rate_hz = {}\n", self.sample_rate_hz));
        out.push_str(&format!("n_samples = {}\n", self.n_samples));
        out.push_str(&format!("source = {}\n", self.source));
        if let Some(seed) = self.generator_seed {
            out.push_str(&format!("generator_seed = {seed}\n"));
        }
        if let Some(digest) = &self.impairment_digest {
            out.push_str(&format!("impairment_digest = {digest}\n"));
        }
        out
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut device_id = None;
        let mut sample_rate_hz = None;
        let mut n_samples = None;
        let mut source = CaptureSource::Imported;
        let mut generator_seed = None;
        let mut impairment_digest = None;
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::format(path, format!("expected key = value, got {line:?}")))?;
            let bad = |e: &dyn fmt::Display| Error::format(path, format!("{key}: {e}"));
            match key {
                "device_id" => device_id = Some(value.parse::<u32>().map_err(|e| bad(&e))?),
                "sample_rate_hz" => sample_rate_hz = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
                "n_samples" => n_samples = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
                "source" => source = value.parse().map_err(|e: String| bad(&e))?,
                "generator_seed" => generator_seed = Some(value.parse::<u64>().map_err(|e| bad(&e))?),
                "impairment_digest" => impairment_digest = Some(value.to_string()),
                _ => log::warn!("{}: ignoring unknown key {key:?}", path.display()),
            }
        }
        let missing = |k: &str| Error::format(path, format!("missing key {k}"));
        Ok(CaptureMeta {
            device_id: device_id.ok_or_else(|| missing("device_id"))?,
            sample_rate_hz: sample_rate_hz.ok_or_else(|| missing("sample_rate_hz"))?,
            n_samples: n_samples.ok_or_else(|| missing("n_samples"))?,
            source,
            generator_seed,
            impairment_digest,
        })
    }
}

/// Sidecar path for a payload: the payload path with `.meta` appended.
pub fn meta_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::MissingParent(path.to_path_buf())),
        _ => Ok(()),
    }
}

pub fn write_capture(capture: &Capture, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    capture.validate()?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &capture.samples {
        w.write_all(&s.re.to_le_bytes())
            .and_then(|_| w.write_all(&s.im.to_le_bytes()))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = meta_path(path);
    fs::write(&meta, capture.meta().to_text()).map_err(|e| Error::io(&meta, e))
}

pub fn read_capture(path: impl AsRef<Path>) -> Result<Capture> {
    let path = path.as_ref();
    let meta_file = meta_path(path);
    if !meta_file.is_file() {
        return Err(Error::MissingMetadata(meta_file));
    }
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta = CaptureMeta::parse(&meta_file, &text)?;

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::LengthMismatch(format!(
            "{}: {} bytes is not a whole number of I/Q pairs",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / 8;
    if n != meta.n_samples {
        return Err(Error::LengthMismatch(format!(
            "{}: payload holds {n} samples, sidecar says {}",
            path.display(),
            meta.n_samples
        )));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();

    Ok(Capture {
        device_id: meta.device_id,
        sample_rate_hz: meta.sample_rate_hz,
        samples,
        source: meta.source,
        generator_seed: meta.generator_seed,
        impairment_digest: meta.impairment_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn interleaves_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.iq");
        let cap = Capture::new(7, 1e6, vec![Complex32::new(1.0, -1.0)]);
        write_capture(&cap, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut expected = 1.0f32.to_le_bytes().to_vec();
        expected.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(bytes, expected);

        let back = read_capture(&path).unwrap();
        assert_eq!(back.samples, vec![Complex32::new(1.0, -1.0)]);
        assert_eq!(back.device_id, 7);
    }

    #[test]
    fn missing_parent_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope").join("x.iq");
        let cap = Capture::new(0, 1e6, vec![Complex32::new(0.0, 0.0)]);
        let err = write_capture(&cap, &path).unwrap_err();
        assert!(err.to_string().contains("missing parent"), "{err}");
    }

    #[test]
    fn non_finite_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.iq");
        let cap = Capture::new(0, 1e6, vec![Complex32::new(0.0, f32::NAN)]);
        assert!(matches!(write_capture(&cap, &path), Err(Error::NonFinite { index: 0 })));
        assert!(!path.exists());
    }

    #[test]
    fn odd_float_count_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odd.iq");
        let cap = Capture::new(0, 1e6, vec![Complex32::new(1.0, 2.0); 3]);
        write_capture(&cap, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        let err = read_capture(&path).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.iq");
        let cap = Capture::new(0, 1e6, vec![Complex32::new(1.0, 2.0); 4]);
        write_capture(&cap, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_capture(&path), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.iq");
        fs::write(&path, [0u8; 8]).unwrap();
        let err = read_capture(&path).unwrap_err();
        assert!(err.to_string().contains("missing metadata"), "{err}");
    }

    #[test]
    fn random_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rand.iq");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<Complex32> = (0..4096)
            .map(|_| Complex32::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let mut cap = Capture::new(3, 1e6, samples);
        cap.source = CaptureSource::Synthetic;
        cap.generator_seed = Some(99);
        cap.impairment_digest = Some("abc123".into());
        write_capture(&cap, &path).unwrap();
        let back = read_capture(&path).unwrap();
        assert_eq!(back.meta(), cap.meta());
        assert!(back
            .samples
            .iter()
            .zip(&cap.samples)
            .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()));
    }

    #[test]
    fn ten_megabyte_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.iq");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 10 * 1024 * 1024 / 8;
        let samples: Vec<Complex32> = (0..n).map(|_| Complex32::new(rng.random(), rng.random())).collect();
        let cap = Capture::new(1, 2.5e5, samples);
        write_capture(&cap, &path).unwrap();
        assert_eq!(read_capture(&path).unwrap(), cap);
    }
}
