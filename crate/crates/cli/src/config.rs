//! Run configuration: built-in defaults, then the config file, then path
//! environment variables, then `--set` overrides, then explicit flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hinova_core::baselines::{DEFAULT_ALPHA, DEFAULT_TAIL_SIZE};
use hinova_core::detector::Grouping;
use hinova_core::eval::{ExperimentConfig, Method};
use hinova_core::fingerprint::{FingerprintMode, HiddenSource, DEFAULT_BINS};
use hinova_core::nn::{Head, ModelSpec, TrainHyper};
use hinova_core::preprocess::{Estimator, FeatureConfig};
use hinova_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variables that may override paths, and the key each sets.
pub const PATH_ENV: [(&str, &str); 6] = [
    ("HINOVA_DATASET", "dataset"),
    ("HINOVA_FEATURES", "features"),
    ("HINOVA_CHECKPOINT", "checkpoint"),
    ("HINOVA_FINGERPRINTS", "fingerprints"),
    ("HINOVA_SCORES", "scores"),
    ("HINOVA_REPORTS", "reports"),
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthSection,
    pub features: FeatureSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub split: SplitSection,
    pub fingerprint: FingerprintSection,
    pub detect: DetectSection,
    pub baseline: BaselineSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of captures with a `manifest.txt`.
    pub dataset: PathBuf,
    /// Feature cache written by `slice`.
    pub features: PathBuf,
    pub checkpoint: PathBuf,
    pub fingerprints: PathBuf,
    /// Scores CSV written by `detect` and `baseline`.
    pub scores: PathBuf,
    /// Report directory written by `evaluate`.
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "work/captures".into(),
            features: "work/features.hsl".into(),
            checkpoint: "work/model.hnv".into(),
            fingerprints: "work/fingerprints.hfp".into(),
            scores: "work/scores.csv".into(),
            reports: "work/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub devices: usize,
    pub capture_seconds: f64,
    pub sample_rate_hz: f64,
    pub snr_db: f64,
    pub separability: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            devices: d.n_devices,
            capture_seconds: d.capture_seconds,
            sample_rate_hz: d.sample_rate_hz,
            snr_db: d.snr_db,
            separability: d.separability,
            seed: d.master_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub normalize: bool,
    /// `raw`, `biased` or `unbiased`.
    pub estimator: String,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let d = FeatureConfig::default();
        FeatureSection {
            normalize: d.normalize,
            estimator: d.estimator.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `desk` (single-core scale) or `full` (published layer sizes).
    pub preset: String,
    /// `lstm` or `cnn`; used by `train`.
    pub head: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            head: "lstm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainHyper::desk();
        TrainSection {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed: d.seed,
        }
    }
}

/// Which devices are known and which slice partition is held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    pub known: usize,
    pub unknown: usize,
    pub folds: usize,
    /// Held-out partition for `train`, `fingerprint`, `detect`, `baseline`.
    pub fold: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            seed: 1,
            known: 10,
            unknown: 5,
            folds: 5,
            fold: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintSection {
    pub bins: usize,
    /// `single` or `pairwise`.
    pub mode: String,
    /// `final` or `all-steps`.
    pub source: String,
    pub normalize: bool,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        FingerprintSection {
            bins: DEFAULT_BINS,
            mode: "single".into(),
            source: "final".into(),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    /// `device`, `window` or `window:W`.
    pub grouping: String,
    /// Flag groups scoring above this value; unset leaves flags empty.
    pub threshold: Option<f64>,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            grouping: "device".into(),
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// `maxlogit-cnn`, `maxlogit-cnnlstm` or `openmax`.
    pub method: String,
    pub tail_size: usize,
    pub alpha: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            method: "maxlogit-cnnlstm".into(),
            tail_size: DEFAULT_TAIL_SIZE,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub methods: Vec<String>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            methods: Method::ALL.iter().map(Method::to_string).collect(),
        }
    }
}

fn parse<T: std::str::FromStr<Err = String>>(what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|e: String| anyhow!("{what}: {e}"))
}

/// Parses a `--set` value as a TOML scalar or array, falling back to a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Resolves defaults, file, environment and `--set` overrides in that
    /// order.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut table, user);
        }
        for (var, key) in PATH_ENV {
            if let Ok(v) = std::env::var(var) {
                set_key(&mut table, &format!("paths.{key}"), toml::Value::String(v))?;
            }
        }
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects section.key=value, got {s:?}"))?;
            set_key(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let config: RunConfig = table.try_into().context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every enumerated setting parses.
    pub fn validate(&self) -> Result<()> {
        self.feature_config()?;
        self.model_spec(2)?;
        self.head()?;
        self.fingerprint_mode()?;
        self.hidden_source()?;
        self.grouping()?;
        self.baseline_method()?;
        self.methods()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the resolved configuration, defaults included.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_devices: s.devices,
            capture_seconds: s.capture_seconds,
            sample_rate_hz: s.sample_rate_hz,
            snr_db: s.snr_db,
            separability: s.separability,
            master_seed: s.seed,
        }
    }

    pub fn feature_config(&self) -> Result<FeatureConfig> {
        Ok(FeatureConfig {
            normalize: self.features.normalize,
            estimator: parse::<Estimator>("features.estimator", &self.features.estimator)?,
        })
    }

    pub fn model_spec(&self, n_classes: usize) -> Result<ModelSpec> {
        match self.model.preset.as_str() {
            "desk" => Ok(ModelSpec::desk(n_classes)),
            "full" => Ok(ModelSpec::full(n_classes)),
            other => bail!("model.preset: unknown preset {other:?} (expected desk or full)"),
        }
    }

    pub fn head(&self) -> Result<Head> {
        parse("model.head", &self.model.head)
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            ..TrainHyper::desk()
        }
    }

    pub fn fingerprint_mode(&self) -> Result<FingerprintMode> {
        parse("fingerprint.mode", &self.fingerprint.mode)
    }

    pub fn hidden_source(&self) -> Result<HiddenSource> {
        parse("fingerprint.source", &self.fingerprint.source)
    }

    pub fn grouping(&self) -> Result<Grouping> {
        parse("detect.grouping", &self.detect.grouping)
    }

    pub fn baseline_method(&self) -> Result<Method> {
        let m: Method = parse("baseline.method", &self.baseline.method)?;
        match m {
            Method::MaxLogitCnn | Method::MaxLogitCnnLstm | Method::OpenMax => Ok(m),
            other => bail!("baseline.method: {other} is not a baseline"),
        }
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.evaluate
            .methods
            .iter()
            .map(|m| parse("evaluate.methods", m))
            .collect()
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let split = &self.split;
        let mut config = ExperimentConfig::new(self.model_spec(split.known)?, self.hyper());
        config.seed = split.seed;
        config.n_known = split.known;
        config.n_unknown = split.unknown;
        config.k_folds = split.folds;
        config.methods = self.methods()?;
        config.bins = self.fingerprint.bins;
        config.normalize = self.fingerprint.normalize;
        config.source = self.hidden_source()?;
        config.grouping = self.grouping()?;
        config.tail_size = self.baseline.tail_size;
        config.alpha = self.baseline.alpha;
        Ok(config)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| anyhow!("override key {key:?} must be section.key"))?;
    match table.get_mut(section) {
        Some(toml::Value::Table(t)) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => bail!("unknown config section {section:?}"),
    }
}
