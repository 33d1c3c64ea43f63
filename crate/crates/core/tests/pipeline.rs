use std::collections::BTreeMap;
use std::path::Path;

use hinova_core::dataio::{load_checkpoint, save_checkpoint, Dataset};
use hinova_core::fingerprint::{run_model, HiddenSource};
use hinova_core::nn::{train, ModelSpec, TrainHyper};
use hinova_core::preprocess::{build_slice_dataset, synthesize_features, FeatureConfig, SliceDataset};
use hinova_core::synth::{synthesize_dataset, SynthConfig};

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn small(separability: f64, master_seed: u64) -> SynthConfig {
    SynthConfig {
        n_devices: 4,
        capture_seconds: 0.2,
        separability,
        master_seed,
        ..SynthConfig::default()
    }
}

#[test]
fn datasets_are_bytewise_reproducible() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    synthesize_dataset(&small(1.0, 9), a.path()).unwrap();
    synthesize_dataset(&small(1.0, 9), b.path()).unwrap();
    synthesize_dataset(&small(1.0, 10), c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert!(ta.len() > 4);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);

    let on_disk = build_slice_dataset(&Dataset::open(a.path()).unwrap(), &FeatureConfig::default()).unwrap();
    let in_memory = synthesize_features(&small(1.0, 9), &FeatureConfig::default()).unwrap();
    assert_eq!(on_disk.slices, in_memory.slices);
}

/// Eval-mode accuracy on the training slices after a short desk run.
fn fit_accuracy(data: &SliceDataset) -> f64 {
    let ids = data.device_ids();
    let inputs: Vec<&[f32]> = data.slices.iter().map(|s| s.features.as_slice()).collect();
    let labels: Vec<usize> = data
        .slices
        .iter()
        .map(|s| ids.binary_search(&s.device_id).unwrap())
        .collect();
    let hyper = TrainHyper {
        epochs: 8,
        seed: 5,
        ..TrainHyper::desk()
    };
    let model = train(&ModelSpec::desk(ids.len()), &inputs, &labels, ids, &hyper).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hnv");
    save_checkpoint(&path, &model).unwrap();
    let model = load_checkpoint(&path).unwrap();

    let refs: Vec<_> = data.slices.iter().collect();
    let out = run_model(&model, &refs, HiddenSource::Final).unwrap();
    let hits = out.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[test]
fn separable_devices_are_easier_to_fit() {
    let cfg = FeatureConfig::default();
    let distinct = fit_accuracy(&synthesize_features(&small(1.0, 3), &cfg).unwrap());
    let identical = fit_accuracy(&synthesize_features(&small(0.0, 3), &cfg).unwrap());
    assert!(distinct >= identical, "{distinct} < {identical}");
    assert!(distinct > 0.5, "{distinct}");
}
