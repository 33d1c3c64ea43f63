//! Open-set scoring: rank-correlate a test fingerprint with every known
//! device fingerprint and report `1 − max τ`.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataio::ensure_parent;
use crate::error::{Error, Result};
use crate::fingerprint::{Fingerprint, FingerprintLayout, ModelOutputs};

/// Pair counts behind Kendall's τ-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// Tied in `x` only.
    pub ties_x: u64,
    /// Tied in `y` only.
    pub ties_y: u64,
    /// Tied in both.
    pub ties_xy: u64,
}

impl PairCounts {
    /// τ-b, or `None` when either side is constant.
    pub fn tau_b(&self) -> Option<f64> {
        let (p, q) = (self.concordant, self.discordant);
        let den_x = p + q + self.ties_x;
        let den_y = p + q + self.ties_y;
        if den_x == 0 || den_y == 0 {
            return None;
        }
        Some((p as f64 - q as f64) / ((den_x as f64) * (den_y as f64)).sqrt())
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!(
            "τ inputs of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::LengthMismatch("τ needs at least two observations".into()));
    }
    Ok(())
}

/// Quadratic pair enumeration.
pub fn pair_counts_brute(x: &[f64], y: &[f64]) -> PairCounts {
    let mut c = PairCounts::default();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            match (x[i].total_cmp(&x[j]), y[i].total_cmp(&y[j])) {
                (Ordering::Equal, Ordering::Equal) => c.ties_xy += 1,
                (Ordering::Equal, _) => c.ties_x += 1,
                (_, Ordering::Equal) => c.ties_y += 1,
                (a, b) if a == b => c.concordant += 1,
                _ => c.discordant += 1,
            }
        }
    }
    c
}

fn tied_pairs(sorted_keys: impl Iterator<Item = bool>) -> u64 {
    // `sorted_keys` yields "equal to previous" flags in sorted order.
    let (mut total, mut run) = (0u64, 1u64);
    for same in sorted_keys {
        if same {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` by `y` and returns the number of inversions (strict).
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// `O(n log n)` pair counts (Knight's algorithm): sort by `(x, y)`, count
/// ties, then count discordant pairs as merge-sort inversions in `y`.
pub fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    let n = x.len() as u64;
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let tie_x = tied_pairs(idx.windows(2).map(|w| x[w[0]].total_cmp(&x[w[1]]) == Ordering::Equal));
    let tie_joint = tied_pairs(
        idx.windows(2)
            .map(|w| x[w[0]].total_cmp(&x[w[1]]) == Ordering::Equal && y[w[0]].total_cmp(&y[w[1]]) == Ordering::Equal),
    );
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let discordant = merge_count(&mut ys, &mut buf);
    let tie_y = tied_pairs(ys.windows(2).map(|w| w[0].total_cmp(&w[1]) == Ordering::Equal));
    let total = n * n.saturating_sub(1) / 2;
    PairCounts {
        concordant: total + tie_joint - tie_x - tie_y - discordant,
        discordant,
        ties_x: tie_x - tie_joint,
        ties_y: tie_y - tie_joint,
        ties_xy: tie_joint,
    }
}

/// Kendall's τ-b in `O(n log n)`.
///
/// ```
/// use hinova_core::detector::kendall_tau;
/// let t = kendall_tau(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 3.0]).unwrap();
/// assert_eq!(t, 0.8);
/// ```
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pair_counts(x, y).tau_b().ok_or(Error::DegenerateRanking)
}

/// Kendall's τ-b by direct pair enumeration.
pub fn kendall_tau_brute(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pair_counts_brute(x, y).tau_b().ok_or(Error::DegenerateRanking)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupScore {
    pub group_id: String,
    /// τ against each known fingerprint; `None` where undefined.
    pub taus: Vec<Option<f64>>,
    pub best_match: Option<String>,
    /// Maximal correlation; `None` when every τ was undefined.
    pub tau_max: Option<f64>,
    /// `1 − τ_max` in `[0, 2]`; `2` when undefined.
    pub score: f64,
    pub flag: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub known_ids: Vec<String>,
    pub entries: Vec<GroupScore>,
}

impl ScoreReport {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// CSV with columns `group_id,best_match,tau_max,score,flag` followed by
    /// one `tau_<known id>` column per known device.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        let mut s = String::from("group_id,best_match,tau_max,score,flag");
        for id in &self.known_ids {
            s.push_str(&format!(",tau_{id}"));
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |t| format!("{t}"));
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{}",
                e.group_id,
                e.best_match.as_deref().unwrap_or(""),
                opt(e.tau_max),
                e.score,
                e.flag.map_or(String::new(), |f| (f as u8).to_string())
            ));
            for t in &e.taus {
                s.push(',');
                s.push_str(&opt(*t));
            }
            s.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(s.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn check_layouts(known: &[Fingerprint], test: &FingerprintLayout) -> Result<()> {
    if known.is_empty() {
        return Err(Error::Config("no known fingerprints".into()));
    }
    for k in known {
        if !k.layout.compatible(test) {
            return Err(Error::ModeMismatch(format!(
                "known fingerprint {} is {} {}×{}, test is {} {}×{}",
                k.id, k.layout.mode, k.layout.hidden, k.layout.bins, test.mode, test.hidden, test.bins
            )));
        }
    }
    Ok(())
}

/// Scores one test fingerprint against every known fingerprint.
pub fn score_open_set(known: &[Fingerprint], test: &Fingerprint) -> Result<GroupScore> {
    check_layouts(known, &test.layout)?;
    let y: Vec<f64> = test.values.iter().map(|&v| v as f64).collect();
    let mut taus = Vec::with_capacity(known.len());
    for k in known {
        let x: Vec<f64> = k.values.iter().map(|&v| v as f64).collect();
        taus.push(match kendall_tau(&x, &y) {
            Ok(t) => Some(t),
            Err(Error::DegenerateRanking) => None,
            Err(e) => return Err(e),
        });
    }
    let best = taus.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).fold(
        None,
        |acc: Option<(usize, f64)>, (i, t)| match acc {
            Some((_, bt)) if bt >= t => acc,
            _ => Some((i, t)),
        },
    );
    let (best_match, tau_max, score) = match best {
        Some((i, t)) => (Some(known[i].id.clone()), Some(t), (1.0 - t).clamp(0.0, 2.0)),
        None => {
            log::warn!(
                "group {}: rank correlation undefined against every known device; scoring as novel",
                test.id
            );
            (None, None, 2.0)
        }
    };
    Ok(GroupScore {
        group_id: test.id.clone(),
        taus,
        best_match,
        tau_max,
        score,
        flag: None,
    })
}

/// Scores every group and flags those whose score exceeds `threshold`.
pub fn detect(known: &[Fingerprint], groups: &[Fingerprint], threshold: Option<f64>) -> Result<ScoreReport> {
    if let Some(t) = threshold {
        if !(0.0..=2.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} outside [0, 2]")));
        }
    }
    let mut entries = groups
        .par_iter()
        .map(|g| score_open_set(known, g))
        .collect::<Result<Vec<_>>>()?;
    for e in &mut entries {
        e.flag = threshold.map(|t| e.score > t);
    }
    Ok(ScoreReport {
        known_ids: known.iter().map(|k| k.id.clone()).collect(),
        entries,
    })
}

/// How test slices are pooled into fingerprints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Grouping {
    /// All test slices of one device form one group.
    #[default]
    ByDevice,
    /// Consecutive windows of `W` slices per device; a short tail window is kept.
    Window(usize),
}

impl std::fmt::Display for Grouping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Grouping::ByDevice => f.write_str("device"),
            Grouping::Window(w) => write!(f, "window:{w}"),
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "device" => Ok(Grouping::ByDevice),
            "window" => Ok(Grouping::Window(DEFAULT_WINDOW)),
            _ => match s.strip_prefix("window:").map(str::parse::<usize>) {
                Some(Ok(w)) if w > 0 => Ok(Grouping::Window(w)),
                _ => Err(format!(
                    "unknown grouping {s:?} (expected device, window or window:<W>)"
                )),
            },
        }
    }
}

pub const DEFAULT_WINDOW: usize = 32;

/// A set of test slices scored together. `members` index into the
/// [`ModelOutputs`] the group was formed from.
#[derive(Debug, Clone, PartialEq)]
pub struct TestGroup {
    pub id: String,
    pub device_id: u32,
    pub members: Vec<usize>,
}

pub fn make_groups(outputs: &ModelOutputs, grouping: Grouping) -> Vec<TestGroup> {
    let mut by_device: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &d) in outputs.device_ids.iter().enumerate() {
        by_device.entry(d).or_default().push(i);
    }
    let mut groups = Vec::new();
    for (device_id, mut members) in by_device {
        members.sort_by_key(|&i| outputs.slice_indices[i]);
        match grouping {
            Grouping::ByDevice => groups.push(TestGroup {
                id: format!("dev{device_id}"),
                device_id,
                members,
            }),
            Grouping::Window(w) => {
                for (k, chunk) in members.chunks(w).enumerate() {
                    groups.push(TestGroup {
                        id: format!("dev{device_id}-w{k}"),
                        device_id,
                        members: chunk.to_vec(),
                    });
                }
            }
        }
    }
    groups
}

/// Fingerprint of a test group from all its slices (no correctness filter).
pub fn build_test_fingerprint(
    outputs: &ModelOutputs,
    id: &str,
    members: &[usize],
    layout: FingerprintLayout,
) -> Result<Fingerprint> {
    if members.is_empty() {
        return Err(Error::EmptyGroup(id.to_string()));
    }
    if outputs.hidden != layout.hidden {
        return Err(Error::ModeMismatch(format!(
            "outputs have {} hidden nodes, fingerprints {}",
            outputs.hidden, layout.hidden
        )));
    }
    if outputs.source != layout.source {
        return Err(Error::ModeMismatch(format!(
            "outputs hold {} hidden states, fingerprints were built from {}",
            outputs.source, layout.source
        )));
    }
    let m = outputs.hidden;
    let r = outputs.rows_per_slice;
    let rows = members.iter().flat_map(|&i| {
        (i * r..(i + 1) * r).map(move |row| {
            (
                &outputs.previous[row * m..(row + 1) * m],
                &outputs.current[row * m..(row + 1) * m],
            )
        })
    });
    Ok(Fingerprint::from_rows(id, layout, members.len(), rows))
}

/// Threshold maximizing F1 when flagging `score > threshold`; ties go to the
/// lowest threshold. Returns `(threshold, f1)`.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut candidates = vec![(f64::NEG_INFINITY, positives, scores.len())];
    let (mut tp, mut flagged) = (0usize, 0usize);
    // Walk from the highest score down; a threshold equal to a score flags
    // everything strictly above it.
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        candidates.push((s, tp, flagged));
        while k < order.len() && scores[order[k]] == s {
            tp += labels[order[k]] as usize;
            flagged += 1;
            k += 1;
        }
    }
    let f1 = |tp: usize, flagged: usize| {
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (flagged + positives) as f64
        }
    };
    let mut best = (f64::NEG_INFINITY, -1.0);
    for (t, tp, flagged) in candidates {
        let f = f1(tp, flagged);
        if f > best.1 || (f == best.1 && t < best.0) {
            best = (t, f);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::{FingerprintMode, HiddenSource};

    #[test]
    fn hand_cases() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let c = pair_counts(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 3.0]);
        assert_eq!(
            c,
            PairCounts {
                concordant: 4,
                discordant: 0,
                ties_x: 1,
                ties_y: 1,
                ties_xy: 0
            }
        );
        assert_eq!(c.tau_b(), Some(0.8));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            kendall_tau(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::DegenerateRanking)
        ));
        assert!(matches!(kendall_tau(&[1.0], &[2.0]), Err(Error::LengthMismatch(_))));
        assert!(matches!(
            kendall_tau(&[1.0, 2.0], &[2.0]),
            Err(Error::LengthMismatch(_))
        ));
    }

    fn fp(id: &str, values: Vec<f32>) -> Fingerprint {
        let layout = FingerprintLayout {
            mode: FingerprintMode::Single,
            hidden: 1,
            bins: values.len(),
            source: HiddenSource::Final,
            normalized: false,
        };
        Fingerprint {
            id: id.into(),
            layout,
            slices: 1,
            values,
        }
    }

    #[test]
    fn identical_fingerprint_scores_zero() {
        let known = vec![fp("1", vec![3.0, 1.0, 0.0, 2.0]), fp("2", vec![0.0, 1.0, 2.0, 3.0])];
        let s = score_open_set(&known, &fp("t", vec![3.0, 1.0, 0.0, 2.0])).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.best_match.as_deref(), Some("1"));
    }

    #[test]
    fn constant_test_fingerprint_is_maximally_novel() {
        let known = vec![fp("1", vec![3.0, 1.0, 0.0, 2.0])];
        let s = score_open_set(&known, &fp("t", vec![0.0; 4])).unwrap();
        assert_eq!((s.score, s.tau_max), (2.0, None));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let known = vec![fp("1", vec![3.0, 1.0, 0.0, 2.0])];
        assert!(matches!(
            score_open_set(&known, &fp("t", vec![1.0, 2.0, 3.0])),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn threshold_extremes() {
        let known = vec![fp("1", vec![3.0, 1.0, 0.0, 2.0])];
        let groups = vec![fp("a", vec![3.0, 1.0, 0.0, 2.0]), fp("b", vec![0.0, 1.0, 2.0, 3.0])];
        let r0 = detect(&known, &groups, Some(0.0)).unwrap();
        assert_eq!(
            r0.entries.iter().map(|e| e.flag).collect::<Vec<_>>(),
            vec![Some(false), Some(true)]
        );
        let r2 = detect(&known, &groups, Some(2.0)).unwrap();
        assert!(r2.entries.iter().all(|e| e.flag == Some(false)));
        assert!(detect(&known, &groups, Some(2.5)).is_err());
    }

    #[test]
    fn f1_sweep_matches_grid_search() {
        let scores = [0.1, 0.4, 0.4, 0.9, 0.3, 0.7, 0.2];
        let labels = [false, true, false, true, false, true, false];
        let (t, f) = best_f1_threshold(&scores, &labels).unwrap();
        let f1_at = |t: f64| {
            let tp = scores.iter().zip(&labels).filter(|(s, l)| **s > t && **l).count();
            let fl = scores.iter().filter(|s| **s > t).count();
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (fl + 3) as f64
            }
        };
        let grid_best = (-10..=100).map(|k| f1_at(k as f64 / 100.0)).fold(0.0, f64::max);
        assert!((f - grid_best).abs() < 1e-12);
        assert!((f1_at(t) - f).abs() < 1e-12);
    }

    #[test]
    fn grouping_parses() {
        assert_eq!("device".parse::<Grouping>().unwrap(), Grouping::ByDevice);
        assert_eq!("window".parse::<Grouping>().unwrap(), Grouping::Window(32));
        assert_eq!("window:8".parse::<Grouping>().unwrap(), Grouping::Window(8));
        assert!("window:0".parse::<Grouping>().is_err());
    }
}
