//! One function per subcommand. Each reads its inputs from the configured
//! paths and writes only its own output.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use hinova_core::baselines::{fit_openmax, maxlogit_score, openmax_score};
use hinova_core::dataio::{load_checkpoint, save_checkpoint, Dataset};
use hinova_core::detector::{build_test_fingerprint, detect, make_groups, GroupScore, ScoreReport};
use hinova_core::eval::{auprc, make_openset_folds, run_experiment, FoldSpec, Method};
use hinova_core::fingerprint::{
    build_fingerprints_with, collect_hidden, load_fingerprints, run_model, save_fingerprints, HiddenSource,
    ModelOutputs,
};
use hinova_core::nn::{train, Head, TrainHyper, TrainedModel};
use hinova_core::preprocess::{build_slice_dataset, FeatureSlice, SliceDataset};
use hinova_core::seed::derive_seed;
use hinova_core::synth::synthesize_dataset;

use crate::config::RunConfig;

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn refuse_overwrite(output: &Path, inputs: &[&Path]) -> Result<()> {
    if inputs.contains(&output) {
        bail!("output {} would overwrite an input", output.display());
    }
    Ok(())
}

fn load_features(config: &RunConfig) -> Result<SliceDataset> {
    let path = &config.paths.features;
    require(path, "feature cache")?;
    Ok(SliceDataset::load(path)?)
}

fn load_model(config: &RunConfig) -> Result<TrainedModel> {
    let path = &config.paths.checkpoint;
    require(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn fold_spec(config: &RunConfig, data: &SliceDataset) -> Result<FoldSpec> {
    let s = &config.split;
    let folds = make_openset_folds(data, s.known, s.unknown, s.folds, s.seed)?;
    folds
        .into_iter()
        .nth(s.fold)
        .with_context(|| format!("split.fold {} out of range for {} folds", s.fold, s.folds))
}

fn pick<'a>(data: &'a SliceDataset, ids: &[(u32, usize)]) -> Vec<&'a FeatureSlice> {
    let index: HashMap<(u32, usize), &FeatureSlice> =
        data.slices.iter().map(|s| ((s.device_id, s.slice_index), s)).collect();
    ids.iter().map(|id| index[id]).collect()
}

fn check_split(model: &TrainedModel, fold: &FoldSpec) -> Result<()> {
    if model.class_device_ids != fold.known {
        bail!(
            "checkpoint classes {:?} differ from the split's known devices {:?}",
            model.class_device_ids,
            fold.known
        );
    }
    Ok(())
}

pub fn synth(config: &RunConfig, force: bool) -> Result<String> {
    let dir = &config.paths.dataset;
    if dir.join(hinova_core::dataio::MANIFEST_FILE).exists() && !force {
        bail!("{} already holds a dataset (pass --force to replace it)", dir.display());
    }
    let ds = synthesize_dataset(&config.synth_config(), dir)?;
    Ok(format!("wrote {} captures to {}", ds.entries.len(), dir.display()))
}

pub fn slice(config: &RunConfig) -> Result<String> {
    let (dir, out) = (&config.paths.dataset, &config.paths.features);
    require(dir, "dataset")?;
    refuse_overwrite(out, &[dir])?;
    let data = build_slice_dataset(&Dataset::open(dir)?, &config.feature_config()?)?;
    data.save(out)?;
    Ok(format!(
        "wrote {} slices ({} per device) to {}",
        data.slices.len(),
        data.per_device(),
        out.display()
    ))
}

/// Trains on the split's known devices, holding out `split.fold`. The seed
/// matches the one `evaluate` uses for the same fold and head.
pub fn train_model(config: &RunConfig, log_path: Option<&Path>) -> Result<String> {
    let data = load_features(config)?;
    let out = &config.paths.checkpoint;
    refuse_overwrite(out, &[&config.paths.features])?;
    let fold = fold_spec(config, &data)?;
    let head = config.head()?;
    let slices = pick(&data, &fold.train_ids());
    let inputs: Vec<&[f32]> = slices.iter().map(|s| s.features.as_slice()).collect();
    let labels: Vec<usize> = slices
        .iter()
        .map(|s| {
            fold.known
                .binary_search(&s.device_id)
                .expect("training slices are known")
        })
        .collect();
    let spec = config.model_spec(fold.known.len())?.with_head(head);
    let base = config.hyper();
    let hyper = TrainHyper {
        seed: derive_seed(&[config.split.seed, base.seed, fold.fold as u64, head as u64]),
        ..base
    };
    let model = train(&spec, &inputs, &labels, fold.known.clone(), &hyper)?;
    save_checkpoint(out, &model)?;

    let log_path = log_path.map_or_else(|| out.with_extension("log.csv"), Path::to_path_buf);
    let mut csv = String::from("epoch,loss,accuracy\n");
    for e in &model.log {
        let _ = writeln!(csv, "{},{},{}", e.epoch + 1, e.mean_loss, e.train_accuracy);
    }
    std::fs::write(&log_path, csv).with_context(|| format!("writing {}", log_path.display()))?;
    Ok(format!(
        "trained {head} on {} slices of {} devices; checkpoint {}, log {}",
        inputs.len(),
        fold.known.len(),
        out.display(),
        log_path.display()
    ))
}

fn lstm_model(config: &RunConfig) -> Result<TrainedModel> {
    let model = load_model(config)?;
    if model.head() != Head::Lstm {
        bail!(
            "fingerprints need a CNN+LSTM checkpoint, {} holds a {}",
            config.paths.checkpoint.display(),
            model.head()
        );
    }
    Ok(model)
}

pub fn fingerprint(config: &RunConfig) -> Result<String> {
    let data = load_features(config)?;
    let model = lstm_model(config)?;
    let out = &config.paths.fingerprints;
    refuse_overwrite(out, &[&config.paths.features, &config.paths.checkpoint])?;
    let fold = fold_spec(config, &data)?;
    check_split(&model, &fold)?;
    let slices = pick(&data, &fold.train_ids());
    let bank = collect_hidden(&model, &slices, config.hidden_source()?)?;
    let prints = build_fingerprints_with(
        &bank,
        config.fingerprint_mode()?,
        config.fingerprint.bins,
        config.fingerprint.normalize,
    )?;
    save_fingerprints(out, &prints)?;
    let used: usize = bank.devices.iter().map(|d| d.slices).sum();
    Ok(format!(
        "wrote {} fingerprints from {used} of {} training slices to {}",
        prints.len(),
        slices.len(),
        out.display()
    ))
}

fn test_outputs(config: &RunConfig, model: &TrainedModel, source: HiddenSource) -> Result<(FoldSpec, ModelOutputs)> {
    let data = load_features(config)?;
    let fold = fold_spec(config, &data)?;
    check_split(model, &fold)?;
    let slices = pick(&data, &fold.test_ids());
    Ok((fold, run_model(model, &slices, source)?))
}

fn auprc_line(report: &ScoreReport, fold: &FoldSpec, device_of: &BTreeMap<String, u32>) -> String {
    let labels: Vec<bool> = report
        .entries
        .iter()
        .map(|e| fold.unknown.contains(&device_of[&e.group_id]))
        .collect();
    match auprc(&report.scores(), &labels) {
        Ok(a) => format!("auprc {a:.4} over {} groups", labels.len()),
        Err(e) => format!("auprc unavailable: {e}"),
    }
}

pub fn detect_groups(config: &RunConfig) -> Result<String> {
    let model = lstm_model(config)?;
    let fp_path = &config.paths.fingerprints;
    require(fp_path, "fingerprint file")?;
    let known = load_fingerprints(fp_path)?;
    let layout = known.first().context("fingerprint file is empty")?.layout;
    let out = &config.paths.scores;
    refuse_overwrite(out, &[&config.paths.features, &config.paths.checkpoint, fp_path])?;
    let (fold, outputs) = test_outputs(config, &model, layout.source)?;
    let groups = make_groups(&outputs, config.grouping()?);
    let tests = groups
        .iter()
        .map(|g| build_test_fingerprint(&outputs, &g.id, &g.members, layout))
        .collect::<hinova_core::Result<Vec<_>>>()?;
    let report = detect(&known, &tests, config.detect.threshold)?;
    report.write_csv(out)?;
    let device_of = groups.iter().map(|g| (g.id.clone(), g.device_id)).collect();
    Ok(format!(
        "scored {} groups into {}; {}",
        groups.len(),
        out.display(),
        auprc_line(&report, &fold, &device_of)
    ))
}

pub fn baseline(config: &RunConfig) -> Result<String> {
    let method = config.baseline_method()?;
    let model = load_model(config)?;
    let want = if method == Method::MaxLogitCnn {
        Head::Flatten
    } else {
        Head::Lstm
    };
    if model.head() != want {
        bail!(
            "{method} needs a {want} checkpoint, {} holds a {}",
            config.paths.checkpoint.display(),
            model.head()
        );
    }
    let out = &config.paths.scores;
    refuse_overwrite(out, &[&config.paths.features, &config.paths.checkpoint])?;
    let (fold, outputs) = test_outputs(config, &model, HiddenSource::Final)?;
    let per_slice: Vec<f64> = match method {
        Method::OpenMax => {
            let data = load_features(config)?;
            let train_out = run_model(&model, &pick(&data, &fold.train_ids()), HiddenSource::Final)?;
            let om = fit_openmax(
                &train_out,
                &model.class_device_ids,
                config.baseline.tail_size,
                config.baseline.alpha,
            )?;
            (0..outputs.len())
                .map(|i| openmax_score(&om, outputs.logits_of(i)).1)
                .collect()
        }
        _ => (0..outputs.len())
            .map(|i| maxlogit_score(outputs.logits_of(i)))
            .collect(),
    };
    let groups = make_groups(&outputs, config.grouping()?);
    let threshold = config.detect.threshold;
    let entries = groups
        .iter()
        .map(|g| {
            let score = g.members.iter().map(|&i| per_slice[i]).sum::<f64>() / g.members.len() as f64;
            let mut votes = vec![0usize; model.class_device_ids.len()];
            g.members.iter().for_each(|&i| votes[outputs.predictions[i]] += 1);
            let top = (0..votes.len())
                .max_by_key(|&c| (votes[c], std::cmp::Reverse(c)))
                .unwrap_or(0);
            GroupScore {
                group_id: g.id.clone(),
                taus: vec![],
                best_match: model.class_device_ids.get(top).map(|d| d.to_string()),
                tau_max: None,
                score,
                flag: threshold.map(|t| score > t),
            }
        })
        .collect();
    let report = ScoreReport {
        known_ids: vec![],
        entries,
    };
    report.write_csv(out)?;
    let device_of = groups.iter().map(|g| (g.id.clone(), g.device_id)).collect();
    Ok(format!(
        "{method}: scored {} groups into {}; {}",
        groups.len(),
        out.display(),
        auprc_line(&report, &fold, &device_of)
    ))
}

pub fn evaluate(config: &RunConfig) -> Result<String> {
    let data = load_features(config)?;
    let dir = &config.paths.reports;
    refuse_overwrite(dir, &[&config.paths.features])?;
    let experiment = config.experiment()?;
    let report = run_experiment(&experiment, &data)?;
    report.write(dir)?;
    std::fs::write(dir.join("run.toml"), config.to_toml()).context("writing run.toml")?;
    Ok(format!(
        "{}report digest {}\nwrote {}",
        report.summary(),
        report.digest(),
        dir.display()
    ))
}
