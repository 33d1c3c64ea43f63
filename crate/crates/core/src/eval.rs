//! Open-set cross-validation: device split, fold construction, scoring with
//! every method, AUPRC and report files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::baselines::{fit_openmax, maxlogit_score, openmax_score, DEFAULT_ALPHA, DEFAULT_TAIL_SIZE};
use crate::dataio::ensure_parent;
use crate::detector::{build_test_fingerprint, make_groups, score_open_set, Grouping};
use crate::error::{Error, Result};
use crate::fingerprint::{
    build_fingerprints_with, run_model, FingerprintLayout, FingerprintMode, HiddenBank, HiddenSource, ModelOutputs,
    DEFAULT_BINS,
};
use crate::nn::{train, Head, ModelSpec, TrainHyper, TrainedModel};
use crate::preprocess::{FeatureSlice, SliceDataset};
use crate::seed::{derive_seed, rng_for};

/// `(device_id, slice_index)`
pub type SliceId = (u32, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub experiment_seed: u64,
    pub known: Vec<u32>,
    pub unknown: Vec<u32>,
    /// Per device, the slice indices of each partition.
    pub partitions: BTreeMap<u32, Vec<Vec<usize>>>,
    pub fold: usize,
}

impl FoldSpec {
    pub fn k_folds(&self) -> usize {
        self.partitions.values().next().map_or(0, Vec::len)
    }

    /// Known devices, every partition except the held-out one.
    pub fn train_ids(&self) -> Vec<SliceId> {
        let mut out = Vec::new();
        for &d in &self.known {
            for (p, part) in self.partitions[&d].iter().enumerate() {
                if p != self.fold {
                    out.extend(part.iter().map(|&s| (d, s)));
                }
            }
        }
        out
    }

    /// Held-out partition of known and unknown devices.
    pub fn test_ids(&self) -> Vec<SliceId> {
        let mut out = Vec::new();
        for d in self.known.iter().chain(&self.unknown) {
            out.extend(self.partitions[d][self.fold].iter().map(|&s| (*d, s)));
        }
        out
    }

    /// Fails if a training slice is also a test slice or belongs to an
    /// unknown device.
    pub fn check_hygiene(&self) -> Result<()> {
        let train: HashSet<SliceId> = self.train_ids().into_iter().collect();
        let unknown: HashSet<u32> = self.unknown.iter().copied().collect();
        if let Some(id) = train.iter().find(|(d, _)| unknown.contains(d)) {
            return Err(Error::Config(format!("unknown device {} appears in training", id.0)));
        }
        if let Some(id) = self.test_ids().iter().find(|id| train.contains(id)) {
            return Err(Error::Config(format!("slice {id:?} is in both training and test sets")));
        }
        Ok(())
    }
}

/// Splits devices into known/unknown (seeded) and each device's slices into
/// `k_folds` contiguous equal partitions. Slices beyond a multiple of
/// `k_folds` and devices beyond `n_known + n_unknown` are left out.
pub fn make_openset_folds(
    data: &SliceDataset,
    n_known: usize,
    n_unknown: usize,
    k_folds: usize,
    seed: u64,
) -> Result<Vec<FoldSpec>> {
    use rand::seq::SliceRandom;
    if n_known < 2 || n_unknown == 0 || k_folds < 2 {
        return Err(Error::Config(format!(
            "need ≥ 2 known devices, ≥ 1 unknown device and ≥ 2 folds (got {n_known}, {n_unknown}, {k_folds})"
        )));
    }
    let mut ids = data.device_ids();
    if ids.len() < n_known + n_unknown {
        return Err(Error::TooFewDevices(ids.len()));
    }
    ids.shuffle(&mut rng_for(&[seed, 0x5B17]));
    let mut known = ids[..n_known].to_vec();
    let mut unknown = ids[n_known..n_known + n_unknown].to_vec();
    known.sort_unstable();
    unknown.sort_unstable();

    let mut partitions = BTreeMap::new();
    for &d in known.iter().chain(&unknown) {
        let mut idx: Vec<usize> = data.of_device(d).map(|s| s.slice_index).collect();
        idx.sort_unstable();
        let per = idx.len() / k_folds;
        if per == 0 {
            return Err(Error::Config(format!(
                "device {d} has {} slices, fewer than {k_folds} folds",
                idx.len()
            )));
        }
        partitions.insert(
            d,
            (0..k_folds)
                .map(|p| idx[p * per..(p + 1) * per].to_vec())
                .collect::<Vec<_>>(),
        );
    }
    Ok((0..k_folds)
        .map(|fold| FoldSpec {
            experiment_seed: seed,
            known: known.clone(),
            unknown: unknown.clone(),
            partitions: partitions.clone(),
            fold,
        })
        .collect())
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::NoPositives);
    }
    Ok(positives)
}

/// Blocks of equal score in descending order, as `(size, positives)`.
fn tie_blocks(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if k > 0 && scores[order[k - 1]] == scores[i] {
            let last = blocks.last_mut().expect("block exists");
            last.0 += 1;
            last.1 += labels[i] as usize;
        } else {
            blocks.push((1, labels[i] as usize));
        }
    }
    blocks
}

/// Average precision with unknown (`true`) as the positive class.
///
/// Tied scores are handled exactly: the result is the expected average
/// precision over all orderings of each tied block.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let total_pos = check_labels(scores, labels)? as f64;
    let (mut before, mut pos_before) = (0.0, 0.0);
    let mut ap = 0.0;
    for (n, p) in tie_blocks(scores, labels) {
        if p > 0 {
            let (nf, pf) = (n as f64, p as f64);
            for j in 1..=n {
                let others = if n > 1 {
                    (j - 1) as f64 * (pf - 1.0) / (nf - 1.0)
                } else {
                    0.0
                };
                ap += (pf / nf) * (pos_before + 1.0 + others) / (before + j as f64);
            }
        }
        before += n as f64;
        pos_before += p as f64;
    }
    Ok(ap / total_pos)
}

/// Average precision by enumerating every placement of positives inside
/// each tied block. Exponential; meant as a reference for small inputs.
pub fn auprc_brute(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let total_pos = check_labels(scores, labels)?;
    let blocks = tie_blocks(scores, labels);
    fn placements(n: usize, p: usize) -> Vec<Vec<bool>> {
        if p == 0 {
            return vec![vec![false; n]];
        }
        if n == p {
            return vec![vec![true; n]];
        }
        let mut out = Vec::new();
        for mut rest in placements(n - 1, p - 1) {
            rest.insert(0, true);
            out.push(rest);
        }
        for mut rest in placements(n - 1, p) {
            rest.insert(0, false);
            out.push(rest);
        }
        out
    }
    let per_block: Vec<Vec<Vec<bool>>> = blocks.iter().map(|&(n, p)| placements(n, p)).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    let mut choice = vec![0usize; blocks.len()];
    loop {
        let ranking = choice
            .iter()
            .enumerate()
            .flat_map(|(b, &c)| per_block[b][c].iter().copied());
        let (mut tp, mut ap) = (0usize, 0.0);
        for (k, positive) in ranking.enumerate() {
            if positive {
                tp += 1;
                ap += tp as f64 / (k + 1) as f64;
            }
        }
        sum += ap / total_pos as f64;
        count += 1;
        let mut b = 0;
        loop {
            if b == blocks.len() {
                return Ok(sum / count as f64);
            }
            choice[b] += 1;
            if choice[b] < per_block[b].len() {
                break;
            }
            choice[b] = 0;
            b += 1;
        }
    }
}

/// Precision-recall points, one per distinct score threshold (flagging
/// `score ≥ threshold`), from the highest threshold down.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let total_pos = check_labels(scores, labels)? as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut flagged) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        tp += labels[i] as usize;
        flagged += 1;
        if k + 1 == order.len() || scores[order[k + 1]] != scores[i] {
            points.push((scores[i], tp as f64 / total_pos, tp as f64 / flagged as f64));
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Hinova,
    HinovaPairwise,
    MaxLogitCnn,
    MaxLogitCnnLstm,
    OpenMax,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Hinova,
        Method::HinovaPairwise,
        Method::MaxLogitCnn,
        Method::MaxLogitCnnLstm,
        Method::OpenMax,
    ];

    fn needs_lstm(self) -> bool {
        self != Method::MaxLogitCnn
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Hinova => "hinova",
            Method::HinovaPairwise => "hinova-pairwise",
            Method::MaxLogitCnn => "maxlogit-cnn",
            Method::MaxLogitCnnLstm => "maxlogit-cnnlstm",
            Method::OpenMax => "openmax",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected one of hinova, hinova-pairwise, maxlogit-cnn, maxlogit-cnnlstm, openmax)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// One score per test group.
    Group,
    /// One score per test slice.
    Slice,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Group => "group",
            Granularity::Slice => "slice",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Seeds the device split and every training run.
    pub seed: u64,
    pub n_known: usize,
    pub n_unknown: usize,
    pub k_folds: usize,
    /// Architecture; the class count is set to `n_known` and the head is
    /// chosen per method.
    pub model: ModelSpec,
    /// Training settings; the seed is derived per fold.
    pub hyper: TrainHyper,
    pub methods: Vec<Method>,
    pub bins: usize,
    pub normalize: bool,
    pub source: HiddenSource,
    pub grouping: Grouping,
    pub tail_size: usize,
    pub alpha: usize,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, hyper: TrainHyper) -> Self {
        ExperimentConfig {
            seed: 1,
            n_known: 10,
            n_unknown: 5,
            k_folds: 5,
            model,
            hyper,
            methods: Method::ALL.to_vec(),
            bins: DEFAULT_BINS,
            normalize: true,
            source: HiddenSource::Final,
            grouping: Grouping::ByDevice,
            tail_size: DEFAULT_TAIL_SIZE,
            alpha: DEFAULT_ALPHA,
        }
    }

    /// Canonical `key = value` listing of every setting.
    pub fn describe(&self) -> String {
        let m = &self.model;
        let h = &self.hyper;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_known", self.n_known.to_string());
        kv("n_unknown", self.n_unknown.to_string());
        kv("k_folds", self.k_folds.to_string());
        kv("input", format!("{}x{}", m.input_height, m.input_width));
        kv("kernel", format!("{}x{}", m.kernel.0, m.kernel.1));
        kv(
            "blocks",
            m.blocks
                .iter()
                .map(|b| format!("{}:{}", b.out_channels, b.dropout))
                .collect::<Vec<_>>()
                .join(" "),
        );
        kv("pool", format!("{}x{}", m.pool.0, m.pool.1));
        kv("hidden", m.hidden.to_string());
        kv("bn_momentum", m.bn_momentum.to_string());
        kv("bn_eps", m.bn_eps.to_string());
        kv("forget_bias", m.forget_bias.to_string());
        kv("learning_rate", h.learning_rate.to_string());
        kv("epochs", h.epochs.to_string());
        kv("batch_size", h.batch_size.to_string());
        kv("train_seed", h.seed.to_string());
        kv("adam", format!("{} {} {}", h.beta1, h.beta2, h.eps));
        kv(
            "methods",
            self.methods.iter().map(Method::to_string).collect::<Vec<_>>().join(" "),
        );
        kv("bins", self.bins.to_string());
        kv("normalize", self.normalize.to_string());
        kv("source", self.source.to_string());
        kv("grouping", self.grouping.to_string());
        kv("tail_size", self.tail_size.to_string());
        kv("alpha", self.alpha.to_string());
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.describe().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub ids: Vec<String>,
    /// `true` for unknown devices.
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
    pub auprc: f64,
}

impl FoldResult {
    fn new(fold: usize, ids: Vec<String>, labels: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        let auprc = auprc(&scores, &labels)?;
        Ok(FoldResult {
            fold,
            ids,
            labels,
            scores,
            auprc,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub group: Vec<FoldResult>,
    pub slice: Vec<FoldResult>,
}

impl MethodReport {
    pub fn folds(&self, g: Granularity) -> &[FoldResult] {
        match g {
            Granularity::Group => &self.group,
            Granularity::Slice => &self.slice,
        }
    }

    pub fn mean_auprc(&self, g: Granularity) -> f64 {
        let f = self.folds(g);
        f.iter().map(|r| r.auprc).sum::<f64>() / f.len().max(1) as f64
    }
}

/// Closed-set bookkeeping of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSummary {
    pub fold: usize,
    pub head: Head,
    pub train_slices: usize,
    pub final_loss: f64,
    /// Eval-mode accuracy on the training slices.
    pub train_accuracy: f64,
    /// Eval-mode accuracy on the known devices' held-out slices.
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config: ExperimentConfig,
    pub folds: Vec<FoldSpec>,
    pub methods: Vec<MethodReport>,
    pub training: Vec<TrainingSummary>,
}

impl Report {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// Hash of the configuration and every score and label, bit for bit.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.describe().as_bytes());
        for m in &self.methods {
            h.update(m.method.to_string().as_bytes());
            for r in m.group.iter().chain(&m.slice) {
                h.update((r.fold as u64).to_le_bytes());
                for ((id, l), s) in r.ids.iter().zip(&r.labels).zip(&r.scores) {
                    h.update(id.as_bytes());
                    h.update([*l as u8]);
                    h.update(s.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("method,granularity,fold,auprc\n");
        for m in &self.methods {
            for g in [Granularity::Group, Granularity::Slice] {
                for r in m.folds(g) {
                    let _ = writeln!(s, "{},{g},{},{}", m.method, r.fold, r.auprc);
                }
                let _ = writeln!(s, "{},{g},mean,{}", m.method, m.mean_auprc(g));
            }
        }
        s
    }

    /// Writes `config.txt`, `summary.csv`, `scores.csv`, `pr_curves.csv`
    /// and `training.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let put = |name: &str, body: String| -> Result<()> {
            let path = dir.join(name);
            ensure_parent(&path)?;
            std::fs::File::create(&path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .map_err(|e| Error::io(&path, e))
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        put(
            "config.txt",
            format!(
                "{}config_digest = {}\nreport_digest = {}\n",
                self.config.describe(),
                self.config.digest(),
                self.digest()
            ),
        )?;
        put("summary.csv", self.summary())?;
        let mut scores = String::from("method,granularity,fold,id,unknown,score\n");
        let mut curves = String::from("method,granularity,fold,threshold,recall,precision\n");
        for m in &self.methods {
            for g in [Granularity::Group, Granularity::Slice] {
                for r in m.folds(g) {
                    for ((id, l), sc) in r.ids.iter().zip(&r.labels).zip(&r.scores) {
                        let _ = writeln!(scores, "{},{g},{},{id},{},{sc}", m.method, r.fold, *l as u8);
                    }
                    for (t, rec, prec) in pr_curve(&r.scores, &r.labels)? {
                        let _ = writeln!(curves, "{},{g},{},{t},{rec},{prec}", m.method, r.fold);
                    }
                }
            }
        }
        put("scores.csv", scores)?;
        put("pr_curves.csv", curves)?;
        let mut tr = String::from("fold,head,train_slices,final_loss,train_accuracy,test_accuracy\n");
        for t in &self.training {
            let _ = writeln!(
                tr,
                "{},{},{},{},{},{}",
                t.fold, t.head, t.train_slices, t.final_loss, t.train_accuracy, t.test_accuracy
            );
        }
        put("training.csv", tr)
    }
}

fn accuracy(outputs: &ModelOutputs, model: &TrainedModel, only_known: bool) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for i in 0..outputs.len() {
        match model.class_of(outputs.device_ids[i]) {
            Some(c) => {
                n += 1;
                hit += (outputs.predictions[i] == c) as usize;
            }
            None if !only_known => n += 1,
            None => {}
        }
    }
    hit as f64 / n.max(1) as f64
}

fn train_head(
    config: &ExperimentConfig,
    fold: usize,
    head: Head,
    train_slices: &[&FeatureSlice],
    known: &[u32],
) -> Result<TrainedModel> {
    let spec = ModelSpec {
        n_classes: known.len(),
        ..config.model.clone()
    }
    .with_head(head);
    let hyper = TrainHyper {
        seed: derive_seed(&[config.seed, config.hyper.seed, fold as u64, head as u64]),
        ..config.hyper.clone()
    };
    let inputs: Vec<&[f32]> = train_slices.iter().map(|s| s.features.as_slice()).collect();
    let labels: Vec<usize> = train_slices
        .iter()
        .map(|s| {
            known
                .binary_search(&s.device_id)
                .expect("training slices come from known devices")
        })
        .collect();
    log::info!("fold {fold}: training {head} on {} slices", inputs.len());
    train(&spec, &inputs, &labels, known.to_vec(), &hyper)
}

/// Scores from one fold, per method and granularity.
struct FoldScores {
    group: FoldResult,
    slice: FoldResult,
}

fn group_mean(
    outputs: &ModelOutputs,
    grouping: Grouping,
    per_slice: &[f64],
    unknown: &[u32],
    fold: usize,
) -> Result<FoldScores> {
    let groups = make_groups(outputs, grouping);
    let scores = groups
        .iter()
        .map(|g| g.members.iter().map(|&i| per_slice[i]).sum::<f64>() / g.members.len() as f64)
        .collect();
    let group = FoldResult::new(
        fold,
        groups.iter().map(|g| g.id.clone()).collect(),
        groups.iter().map(|g| unknown.contains(&g.device_id)).collect(),
        scores,
    )?;
    let slice = slice_result(outputs, per_slice.to_vec(), unknown, fold)?;
    Ok(FoldScores { group, slice })
}

fn slice_result(outputs: &ModelOutputs, scores: Vec<f64>, unknown: &[u32], fold: usize) -> Result<FoldResult> {
    FoldResult::new(
        fold,
        (0..outputs.len())
            .map(|i| format!("dev{}-s{}", outputs.device_ids[i], outputs.slice_indices[i]))
            .collect(),
        outputs.device_ids.iter().map(|d| unknown.contains(d)).collect(),
        scores,
    )
}

fn hinova_scores(
    config: &ExperimentConfig,
    mode: FingerprintMode,
    train_out: &ModelOutputs,
    test_out: &ModelOutputs,
    model: &TrainedModel,
    unknown: &[u32],
    fold: usize,
) -> Result<FoldScores> {
    let bank = HiddenBank::from_outputs_allowing_empty(train_out, &model.class_device_ids)?;
    let known = build_fingerprints_with(&bank, mode, config.bins, config.normalize)?;
    let layout = FingerprintLayout {
        mode,
        hidden: bank.hidden,
        bins: config.bins,
        source: config.source,
        normalized: config.normalize,
    };
    let groups = make_groups(test_out, config.grouping);
    let mut gscores = Vec::with_capacity(groups.len());
    for g in &groups {
        gscores.push(score_open_set(&known, &build_test_fingerprint(test_out, &g.id, &g.members, layout)?)?.score);
    }
    let group = FoldResult::new(
        fold,
        groups.iter().map(|g| g.id.clone()).collect(),
        groups.iter().map(|g| unknown.contains(&g.device_id)).collect(),
        gscores,
    )?;
    let sscores = {
        use rayon::prelude::*;
        (0..test_out.len())
            .into_par_iter()
            .map(|i| {
                let fp = build_test_fingerprint(test_out, "slice", &[i], layout)?;
                Ok(score_open_set(&known, &fp)?.score)
            })
            .collect::<Result<Vec<f64>>>()?
    };
    let slice = slice_result(test_out, sscores, unknown, fold)?;
    Ok(FoldScores { group, slice })
}

fn run_fold(
    config: &ExperimentConfig,
    data: &SliceDataset,
    spec: &FoldSpec,
    reports: &mut BTreeMap<Method, MethodReport>,
    training: &mut Vec<TrainingSummary>,
) -> Result<()> {
    spec.check_hygiene()?;
    let fold = spec.fold;
    let index: BTreeMap<SliceId, &FeatureSlice> =
        data.slices.iter().map(|s| ((s.device_id, s.slice_index), s)).collect();
    let train_slices: Vec<&FeatureSlice> = spec.train_ids().iter().map(|id| index[id]).collect();
    let test_slices: Vec<&FeatureSlice> = spec.test_ids().iter().map(|id| index[id]).collect();
    let unknown = &spec.unknown;
    let mut push = |m: Method, s: FoldScores| {
        let r = reports.entry(m).or_insert_with(|| MethodReport {
            method: m,
            group: vec![],
            slice: vec![],
        });
        r.group.push(s.group);
        r.slice.push(s.slice);
    };

    let summarize = |head, model: &TrainedModel, train_out: &ModelOutputs, test_out: &ModelOutputs| TrainingSummary {
        fold,
        head,
        train_slices: train_slices.len(),
        final_loss: model.log.last().map_or(f64::NAN, |e| e.mean_loss),
        train_accuracy: accuracy(train_out, model, true),
        test_accuracy: accuracy(test_out, model, true),
    };

    if config.methods.iter().any(|m| m.needs_lstm()) {
        let model = train_head(config, fold, Head::Lstm, &train_slices, &spec.known)?;
        let train_out = run_model(&model, &train_slices, config.source)?;
        let test_out = run_model(&model, &test_slices, config.source)?;
        training.push(summarize(Head::Lstm, &model, &train_out, &test_out));
        let logit_scores: Vec<f64> = (0..test_out.len())
            .map(|i| maxlogit_score(test_out.logits_of(i)))
            .collect();
        for &m in &config.methods {
            let scores = match m {
                Method::Hinova => hinova_scores(
                    config,
                    FingerprintMode::Single,
                    &train_out,
                    &test_out,
                    &model,
                    unknown,
                    fold,
                )?,
                Method::HinovaPairwise => hinova_scores(
                    config,
                    FingerprintMode::Pairwise,
                    &train_out,
                    &test_out,
                    &model,
                    unknown,
                    fold,
                )?,
                Method::MaxLogitCnnLstm => group_mean(&test_out, config.grouping, &logit_scores, unknown, fold)?,
                Method::OpenMax => {
                    let om = fit_openmax(&train_out, &model.class_device_ids, config.tail_size, config.alpha)?;
                    let s: Vec<f64> = (0..test_out.len())
                        .map(|i| openmax_score(&om, test_out.logits_of(i)).1)
                        .collect();
                    group_mean(&test_out, config.grouping, &s, unknown, fold)?
                }
                Method::MaxLogitCnn => continue,
            };
            push(m, scores);
        }
    }
    if config.methods.contains(&Method::MaxLogitCnn) {
        let model = train_head(config, fold, Head::Flatten, &train_slices, &spec.known)?;
        let train_out = run_model(&model, &train_slices, HiddenSource::Final)?;
        let test_out = run_model(&model, &test_slices, HiddenSource::Final)?;
        training.push(summarize(Head::Flatten, &model, &train_out, &test_out));
        let s: Vec<f64> = (0..test_out.len())
            .map(|i| maxlogit_score(test_out.logits_of(i)))
            .collect();
        push(
            Method::MaxLogitCnn,
            group_mean(&test_out, config.grouping, &s, unknown, fold)?,
        );
    }
    Ok(())
}

/// Runs every fold of one experiment with every configured method.
pub fn run_experiment(config: &ExperimentConfig, data: &SliceDataset) -> Result<Report> {
    if config.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let folds = make_openset_folds(data, config.n_known, config.n_unknown, config.k_folds, config.seed)?;
    let mut reports = BTreeMap::new();
    let mut training = Vec::new();
    for spec in &folds {
        run_fold(config, data, spec, &mut reports, &mut training).map_err(|e| Error::Fold {
            fold: spec.fold,
            source: Box::new(e),
        })?;
    }
    let methods = config.methods.iter().filter_map(|m| reports.remove(m)).collect();
    Ok(Report {
        config: config.clone(),
        folds,
        methods,
        training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::FeatureConfig;

    fn fake_dataset(devices: u32, per: usize) -> SliceDataset {
        let slices = (0..devices)
            .flat_map(|d| {
                (0..per).map(move |s| FeatureSlice {
                    features: vec![],
                    device_id: d,
                    slice_index: s,
                })
            })
            .collect();
        SliceDataset {
            slices,
            config: FeatureConfig::default(),
        }
    }

    #[test]
    fn fold_arithmetic() {
        let data = fake_dataset(15, 240);
        let folds = make_openset_folds(&data, 10, 5, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.train_ids().len(), 10 * 192);
            assert_eq!(f.test_ids().len(), 15 * 48);
            f.check_hygiene().unwrap();
        }
        assert_eq!(folds, make_openset_folds(&data, 10, 5, 5, 7).unwrap());
        for (d, parts) in &folds[0].partitions {
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..240).collect::<Vec<_>>(), "device {d}");
        }
    }

    #[test]
    fn truncates_to_multiple_of_folds() {
        let folds = make_openset_folds(&fake_dataset(15, 244), 10, 5, 5, 0).unwrap();
        assert!(folds[0].partitions.values().all(|p| p.iter().all(|x| x.len() == 48)));
    }

    #[test]
    fn too_few_devices() {
        assert!(matches!(
            make_openset_folds(&fake_dataset(12, 20), 10, 5, 5, 0),
            Err(Error::TooFewDevices(12))
        ));
    }

    #[test]
    fn auprc_hand_cases() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let v = auprc(&[0.9, 0.8, 0.1], &[false, true, true]).unwrap();
        assert!((v - 0.583333333).abs() < 1e-6);
        assert!(matches!(auprc(&[0.1, 0.2], &[false, false]), Err(Error::NoPositives)));
    }

    #[test]
    fn all_tied_equals_base_rate_expectation() {
        let labels = [true, false, false, true, false, false];
        let a = auprc(&[0.5; 6], &labels).unwrap();
        let b = auprc_brute(&[0.5; 6], &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pr_curve_ends_at_full_recall() {
        let pts = pr_curve(&[0.9, 0.5, 0.5, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0], (0.9, 0.5, 1.0));
        assert_eq!(pts[1], (0.5, 1.0, 2.0 / 3.0));
        assert_eq!(pts.last().unwrap().1, 1.0);
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("dtw".parse::<Method>().is_err());
    }
}
