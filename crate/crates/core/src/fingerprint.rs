//! Per-device histograms of LSTM hidden-node values.
//!
//! For every known device and hidden node, the values that node takes at the
//! last LSTM step over the device's correctly classified training slices are
//! binned into `B` equal-width bins over `[−1, 1]`. The resulting `M × B`
//! matrix is the device fingerprint. The pairwise variant bins the pair
//! `(h_{T−1}, h_T)` of each node into a `B × B` grid instead.

use std::path::Path;

use rayon::prelude::*;

use crate::dataio::{read_container, write_container, Header};
use crate::error::{Error, Result};
use crate::nn::TrainedModel;
use crate::preprocess::FeatureSlice;

pub const DEFAULT_BINS: usize = 25;
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FingerprintMode {
    /// `M × B`: one histogram of `h_T` per node.
    #[default]
    Single,
    /// `M × B × B`: one joint histogram of `(h_{T−1}, h_T)` per node.
    Pairwise,
}

impl std::fmt::Display for FingerprintMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FingerprintMode::Single => "single",
            FingerprintMode::Pairwise => "pairwise",
        })
    }
}

impl std::str::FromStr for FingerprintMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(FingerprintMode::Single),
            "pairwise" => Ok(FingerprintMode::Pairwise),
            other => Err(format!("unknown fingerprint mode {other:?}")),
        }
    }
}

/// Which LSTM steps feed the histograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HiddenSource {
    /// Only the last step of each slice.
    #[default]
    Final,
    /// Every step; the pair for step 0 uses the zero initial state.
    AllSteps,
}

impl std::fmt::Display for HiddenSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HiddenSource::Final => "final",
            HiddenSource::AllSteps => "all-steps",
        })
    }
}

impl std::str::FromStr for HiddenSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "final" => Ok(HiddenSource::Final),
            "all-steps" | "all" => Ok(HiddenSource::AllSteps),
            other => Err(format!("unknown hidden-state source {other:?}")),
        }
    }
}

/// Eval-mode outputs of a model over a list of slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub device_ids: Vec<u32>,
    pub slice_indices: Vec<usize>,
    pub n_classes: usize,
    /// `[slice][class]`
    pub logits: Vec<f32>,
    pub predictions: Vec<usize>,
    /// Hidden size (0 for a network without an LSTM head).
    pub hidden: usize,
    pub source: HiddenSource,
    /// Rows of `(previous, current)` hidden vectors per slice: one row for
    /// [`HiddenSource::Final`], one per step otherwise.
    pub rows_per_slice: usize,
    /// `[slice][row][node]`
    pub current: Vec<f32>,
    pub previous: Vec<f32>,
}

impl ModelOutputs {
    pub fn len(&self) -> usize {
        self.device_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.device_ids.is_empty()
    }

    pub fn logits_of(&self, i: usize) -> &[f32] {
        &self.logits[i * self.n_classes..(i + 1) * self.n_classes]
    }

    fn rows(&self, i: usize) -> impl Iterator<Item = (&[f32], &[f32])> {
        let m = self.hidden;
        let base = i * self.rows_per_slice;
        (base..base + self.rows_per_slice)
            .map(move |r| (&self.previous[r * m..(r + 1) * m], &self.current[r * m..(r + 1) * m]))
    }
}

/// Runs `model` in eval mode over `slices`, keeping logits, predictions and
/// the hidden rows selected by `source`.
pub fn run_model(model: &TrainedModel, slices: &[&FeatureSlice], source: HiddenSource) -> Result<ModelOutputs> {
    let n_classes = model.spec().n_classes;
    let hidden = if model.network.lstm.is_some() {
        model.spec().hidden
    } else {
        0
    };
    let mut out = ModelOutputs {
        device_ids: slices.iter().map(|s| s.device_id).collect(),
        slice_indices: slices.iter().map(|s| s.slice_index).collect(),
        n_classes,
        logits: Vec::with_capacity(slices.len() * n_classes),
        predictions: Vec::with_capacity(slices.len()),
        hidden,
        source,
        rows_per_slice: 0,
        current: Vec::new(),
        previous: Vec::new(),
    };
    for chunk in slices.chunks(INFER_CHUNK) {
        let inputs: Vec<&[f32]> = chunk.iter().map(|s| s.features.as_slice()).collect();
        let fwd = model.network.forward_eval(&inputs)?;
        out.predictions.extend(fwd.predictions());
        out.logits.extend_from_slice(&fwd.logits);
        let Some(trace) = fwd.hidden else { continue };
        let (m, steps) = (trace.hidden, trace.steps);
        let zeros = vec![0.0f32; m];
        for item in 0..fwd.batch {
            let range = match source {
                HiddenSource::Final => steps - 1..steps,
                HiddenSource::AllSteps => 0..steps,
            };
            out.rows_per_slice = range.len();
            for t in range {
                let prev = if t > 0 { trace.state(item, t - 1) } else { &zeros };
                out.previous.extend_from_slice(prev);
                out.current.extend_from_slice(trace.state(item, t));
            }
        }
    }
    Ok(out)
}

/// Hidden rows of correctly classified slices, grouped by known device in
/// class order.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBank {
    pub hidden: usize,
    pub source: HiddenSource,
    pub devices: Vec<DeviceBank>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviceBank {
    pub device_id: u32,
    /// Number of contributing (correctly classified) slices.
    pub slices: usize,
    /// `[row][node]`
    pub current: Vec<f32>,
    pub previous: Vec<f32>,
}

impl DeviceBank {
    pub fn rows(&self, hidden: usize) -> usize {
        self.current.len() / hidden.max(1)
    }
}

impl HiddenBank {
    /// Keeps the rows of slices whose prediction equals their true class.
    /// A known device without any such slice is an error.
    pub fn from_outputs(outputs: &ModelOutputs, class_device_ids: &[u32]) -> Result<Self> {
        let bank = Self::gather(outputs, class_device_ids)?;
        if let Some(empty) = bank.devices.iter().find(|d| d.slices == 0) {
            return Err(Error::NoCorrectSlices(empty.device_id));
        }
        Ok(bank)
    }

    /// Like [`HiddenBank::from_outputs`], but a device without correctly
    /// classified slices keeps an empty bank (its fingerprint is all zeros
    /// and never matches anything).
    pub fn from_outputs_allowing_empty(outputs: &ModelOutputs, class_device_ids: &[u32]) -> Result<Self> {
        let bank = Self::gather(outputs, class_device_ids)?;
        for d in bank.devices.iter().filter(|d| d.slices == 0) {
            log::warn!(
                "device {}: no correctly classified slices; empty fingerprint",
                d.device_id
            );
        }
        Ok(bank)
    }

    fn gather(outputs: &ModelOutputs, class_device_ids: &[u32]) -> Result<Self> {
        if outputs.hidden == 0 {
            return Err(Error::Config("fingerprints need a network with an LSTM head".into()));
        }
        let m = outputs.hidden;
        let mut devices: Vec<DeviceBank> = class_device_ids
            .iter()
            .map(|&device_id| DeviceBank {
                device_id,
                ..Default::default()
            })
            .collect();
        for i in 0..outputs.len() {
            let id = outputs.device_ids[i];
            let class = class_device_ids
                .iter()
                .position(|&d| d == id)
                .ok_or_else(|| Error::Config(format!("device {id} is not a class of this model")))?;
            if outputs.predictions[i] != class {
                continue;
            }
            let bank = &mut devices[class];
            bank.slices += 1;
            for (prev, cur) in outputs.rows(i) {
                bank.previous.extend_from_slice(prev);
                bank.current.extend_from_slice(cur);
            }
        }
        Ok(HiddenBank {
            hidden: m,
            source: outputs.source,
            devices,
        })
    }
}

/// Runs the model over labelled training slices and gathers the bank.
pub fn collect_hidden(model: &TrainedModel, slices: &[&FeatureSlice], source: HiddenSource) -> Result<HiddenBank> {
    let outputs = run_model(model, slices, source)?;
    HiddenBank::from_outputs(&outputs, &model.class_device_ids)
}

#[inline]
fn bin_of(v: f32, bins: usize) -> usize {
    let x = ((v as f64).clamp(-1.0, 1.0) + 1.0) * 0.5 * bins as f64;
    (x as usize).min(bins - 1)
}

/// Equal-width histogram over `[−1, 1]`; bins are left-closed, the last one
/// also includes `1`. Values outside the range are clamped into the end bins.
pub fn histogram(values: &[f32], bins: usize) -> Vec<u32> {
    let mut counts = vec![0u32; bins];
    if values.is_empty() {
        log::warn!("histogram of an empty value set");
    }
    for &v in values {
        counts[bin_of(v, bins)] += 1;
    }
    counts
}

/// Shape and provenance shared by every fingerprint that may be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FingerprintLayout {
    pub mode: FingerprintMode,
    pub hidden: usize,
    pub bins: usize,
    pub source: HiddenSource,
    /// Entries divided by the number of contributing rows.
    pub normalized: bool,
}

impl FingerprintLayout {
    pub fn len(&self) -> usize {
        match self.mode {
            FingerprintMode::Single => self.hidden * self.bins,
            FingerprintMode::Pairwise => self.hidden * self.bins * self.bins,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether two fingerprints can be correlated entry by entry.
    pub fn compatible(&self, other: &Self) -> bool {
        self.mode == other.mode && self.hidden == other.hidden && self.bins == other.bins
    }
}

/// A flattened histogram matrix: node-major, then bin (single mode) or
/// previous-bin-major, current-bin-minor (pairwise mode).
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    /// Known device id, or a test-group name.
    pub id: String,
    pub layout: FingerprintLayout,
    /// Slices that contributed.
    pub slices: usize,
    pub values: Vec<f32>,
}

impl Fingerprint {
    /// Builds a fingerprint from `(previous, current)` rows of `hidden` nodes.
    pub fn from_rows<'a>(
        id: impl Into<String>,
        layout: FingerprintLayout,
        slices: usize,
        rows: impl Iterator<Item = (&'a [f32], &'a [f32])>,
    ) -> Self {
        let (m, b) = (layout.hidden, layout.bins);
        let mut counts = vec![0u32; layout.len()];
        let mut n_rows = 0usize;
        for (prev, cur) in rows {
            n_rows += 1;
            for node in 0..m {
                let cb = bin_of(cur[node], b);
                let k = match layout.mode {
                    FingerprintMode::Single => node * b + cb,
                    FingerprintMode::Pairwise => (node * b + bin_of(prev[node], b)) * b + cb,
                };
                counts[k] += 1;
            }
        }
        if n_rows == 0 {
            log::warn!("empty fingerprint");
        }
        let scale = if layout.normalized && n_rows > 0 {
            1.0 / n_rows as f64
        } else {
            1.0
        };
        let values = counts.iter().map(|&c| (c as f64 * scale) as f32).collect();
        Fingerprint {
            id: id.into(),
            layout,
            slices,
            values,
        }
    }

    /// `B` entries of one node (single mode).
    pub fn node(&self, node: usize) -> &[f32] {
        let w = self.layout.len() / self.layout.hidden;
        &self.values[node * w..(node + 1) * w]
    }

    /// Collapses a pairwise fingerprint onto its current-step axis.
    pub fn marginal(&self) -> Fingerprint {
        let (m, b) = (self.layout.hidden, self.layout.bins);
        if self.layout.mode == FingerprintMode::Single {
            return self.clone();
        }
        let mut values = vec![0.0f32; m * b];
        for node in 0..m {
            for prev in 0..b {
                for cur in 0..b {
                    values[node * b + cur] += self.values[(node * b + prev) * b + cur];
                }
            }
        }
        Fingerprint {
            id: self.id.clone(),
            layout: FingerprintLayout {
                mode: FingerprintMode::Single,
                ..self.layout
            },
            slices: self.slices,
            values,
        }
    }
}

fn build(bank: &HiddenBank, mode: FingerprintMode, bins: usize, normalize: bool) -> Result<Vec<Fingerprint>> {
    if bins == 0 {
        return Err(Error::Config("bin count must be at least 1".into()));
    }
    let m = bank.hidden;
    let layout = FingerprintLayout {
        mode,
        hidden: m,
        bins,
        source: bank.source,
        normalized: normalize,
    };
    Ok(bank
        .devices
        .par_iter()
        .map(|d| {
            let rows = d.previous.chunks_exact(m).zip(d.current.chunks_exact(m));
            Fingerprint::from_rows(d.device_id.to_string(), layout, d.slices, rows)
        })
        .collect())
}

/// One `M × B` fingerprint per known device.
pub fn build_fingerprints(bank: &HiddenBank, bins: usize, normalize: bool) -> Result<Vec<Fingerprint>> {
    build(bank, FingerprintMode::Single, bins, normalize)
}

/// One `M × B × B` fingerprint per known device.
pub fn build_pairwise_fingerprints(bank: &HiddenBank, bins: usize, normalize: bool) -> Result<Vec<Fingerprint>> {
    build(bank, FingerprintMode::Pairwise, bins, normalize)
}

pub fn build_fingerprints_with(
    bank: &HiddenBank,
    mode: FingerprintMode,
    bins: usize,
    normalize: bool,
) -> Result<Vec<Fingerprint>> {
    build(bank, mode, bins, normalize)
}

const FP_KIND: &str = "fingerprints";
const FP_VERSION: u32 = 1;

/// Writes a set of fingerprints sharing one layout.
pub fn save_fingerprints(path: impl AsRef<Path>, prints: &[Fingerprint]) -> Result<()> {
    let Some(first) = prints.first() else {
        return Err(Error::Config("no fingerprints to save".into()));
    };
    let layout = first.layout;
    if let Some(other) = prints.iter().find(|p| p.layout != layout) {
        return Err(Error::ModeMismatch(format!(
            "fingerprint {} has a different layout",
            other.id
        )));
    }
    let mut h = Header::new(FP_KIND);
    h.push("version", FP_VERSION)
        .push("mode", layout.mode)
        .push("hidden", layout.hidden)
        .push("bins", layout.bins)
        .push("bin_range", "-1 1")
        .push("source", layout.source)
        .push("normalized", layout.normalized);
    let mut blob = Vec::with_capacity(prints.len() * layout.len());
    for p in prints {
        if p.id.contains(char::is_whitespace) {
            return Err(Error::Config(format!("fingerprint id {:?} contains whitespace", p.id)));
        }
        h.push("fingerprint", format!("{} {}", p.id, p.slices));
        blob.extend_from_slice(&p.values);
    }
    write_container(path, &h, &blob)
}

pub fn load_fingerprints(path: impl AsRef<Path>) -> Result<Vec<Fingerprint>> {
    let path = path.as_ref();
    let (h, blob) = read_container(path)?;
    let bad = |r: String| Error::format(path, r);
    if h.kind != FP_KIND {
        return Err(bad(format!("expected fingerprints, found {:?}", h.kind)));
    }
    let version: u32 = h.parse("version").map_err(bad)?;
    if version != FP_VERSION {
        return Err(Error::UnsupportedVersion(format!("fingerprint file version {version}")));
    }
    let layout = FingerprintLayout {
        mode: h.parse("mode").map_err(bad)?,
        hidden: h.parse("hidden").map_err(bad)?,
        bins: h.parse("bins").map_err(bad)?,
        source: h.parse("source").map_err(bad)?,
        normalized: h.parse("normalized").map_err(bad)?,
    };
    let entries: Vec<&str> = h.get_all("fingerprint").collect();
    if blob.len() != entries.len() * layout.len() {
        return Err(Error::LengthMismatch(format!(
            "{}: {} fingerprints of {} entries need {} values, found {}",
            path.display(),
            entries.len(),
            layout.len(),
            entries.len() * layout.len(),
            blob.len()
        )));
    }
    entries
        .iter()
        .zip(blob.chunks_exact(layout.len().max(1)))
        .map(|(line, values)| {
            let (id, slices) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad fingerprint line {line:?}")))?;
            let slices = slices
                .trim()
                .parse()
                .map_err(|e| bad(format!("bad slice count in {line:?}: {e}")))?;
            Ok(Fingerprint {
                id: id.to_string(),
                layout,
                slices,
                values: values.to_vec(),
            })
        })
        .collect()
}
