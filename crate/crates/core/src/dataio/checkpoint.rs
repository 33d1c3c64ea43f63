//! Trained-model checkpoints: architecture, hyperparameters, training log and
//! every learned array (including batch-norm running statistics), stored in
//! the shared container layout.

use std::path::Path;

use crate::dataio::container::{join_words, parse_words, read_container, write_container, Header};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, EpochLog, Head, ModelSpec, Network, TrainHyper, TrainedModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";

fn arrays(net: &Network<f32>) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<(String, Vec<usize>, &[f32])> = net
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.value.as_slice()))
        .collect();
    for (k, bn) in net.norms.iter().enumerate() {
        let c = bn.channels();
        out.push((format!("bn{}.running_mean", k + 1), vec![c], &bn.running_mean));
        out.push((format!("bn{}.running_var", k + 1), vec![c], &bn.running_var));
    }
    out
}

fn spec_header(h: &mut Header, s: &ModelSpec) {
    h.push("head", s.head)
        .push("input", join_words([s.input_height, s.input_width]))
        .push("kernel", join_words([s.kernel.0, s.kernel.1]))
        .push(
            "blocks",
            join_words(s.blocks.iter().map(|b| format!("{}:{}", b.out_channels, b.dropout))),
        )
        .push("pool", join_words([s.pool.0, s.pool.1]))
        .push("hidden", s.hidden)
        .push("n_classes", s.n_classes)
        .push("bn_momentum", s.bn_momentum)
        .push("bn_eps", s.bn_eps)
        .push("forget_bias", s.forget_bias);
}

fn pair(h: &Header, key: &str) -> std::result::Result<(usize, usize), String> {
    match h.parse_list::<usize>(key)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        other => Err(format!("{key} needs two values, got {}", other.len())),
    }
}

fn parse_spec(h: &Header) -> std::result::Result<ModelSpec, String> {
    let (input_height, input_width) = pair(h, "input")?;
    let blocks = h
        .require("blocks")?
        .split_whitespace()
        .map(|w| {
            let (c, d) = w.split_once(':').ok_or_else(|| format!("bad block {w:?}"))?;
            Ok(ConvBlock {
                out_channels: c.parse().map_err(|e| format!("bad block {w:?}: {e}"))?,
                dropout: d.parse().map_err(|e| format!("bad block {w:?}: {e}"))?,
            })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(ModelSpec {
        head: h.parse("head")?,
        input_height,
        input_width,
        kernel: pair(h, "kernel")?,
        blocks,
        pool: pair(h, "pool")?,
        hidden: h.parse("hidden")?,
        n_classes: h.parse("n_classes")?,
        bn_momentum: h.parse("bn_momentum")?,
        bn_eps: h.parse("bn_eps")?,
        forget_bias: h.parse("forget_bias")?,
    })
}

fn parse_hyper(h: &Header) -> std::result::Result<TrainHyper, String> {
    Ok(TrainHyper {
        learning_rate: h.parse("learning_rate")?,
        epochs: h.parse("epochs")?,
        batch_size: h.parse("batch_size")?,
        seed: h.parse("seed")?,
        beta1: h.parse("beta1")?,
        beta2: h.parse("beta2")?,
        eps: h.parse("adam_eps")?,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    let net = &model.network;
    let hy = &model.hyper;
    let mut h = Header::new(KIND);
    h.push("version", CHECKPOINT_VERSION);
    spec_header(&mut h, &net.spec);
    h.push("learning_rate", hy.learning_rate)
        .push("epochs", hy.epochs)
        .push("batch_size", hy.batch_size)
        .push("seed", hy.seed)
        .push("beta1", hy.beta1)
        .push("beta2", hy.beta2)
        .push("adam_eps", hy.eps)
        .push("class_device_ids", join_words(&model.class_device_ids))
        .push("bn_tracked", join_words(net.norms.iter().map(|b| b.tracked)));
    for e in &model.log {
        h.push("epoch", format!("{} {} {}", e.epoch, e.mean_loss, e.train_accuracy));
    }
    let mut blob = Vec::new();
    for (name, shape, values) in arrays(net) {
        h.push("array", format!("{name} {}", join_words(shape)));
        blob.extend_from_slice(values);
    }
    write_container(path, &h, &blob)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let (h, blob) = read_container(path)?;
    let bad = |reason: String| Error::IncompatibleCheckpoint(format!("{}: {reason}", path.display()));
    if h.kind != KIND {
        return Err(bad(format!("file holds {:?}, not a checkpoint", h.kind)));
    }
    let version: u32 = h.parse("version").map_err(bad)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(format!(
            "checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let spec = parse_spec(&h).map_err(bad)?;
    let hyper = parse_hyper(&h).map_err(bad)?;
    let class_device_ids: Vec<u32> = h.parse_list("class_device_ids").map_err(bad)?;
    let tracked: Vec<u64> = h.parse_list("bn_tracked").map_err(bad)?;
    let log = h
        .get_all("epoch")
        .map(|line| {
            let w: Vec<f64> = parse_words(line)?;
            match w.as_slice() {
                [e, l, a] => Ok(EpochLog {
                    epoch: *e as usize,
                    mean_loss: *l,
                    train_accuracy: *a,
                }),
                _ => Err(format!("bad epoch line {line:?}")),
            }
        })
        .collect::<std::result::Result<Vec<_>, String>>()
        .map_err(bad)?;

    let mut net = Network::<f32>::new(&spec, 0).map_err(|e| bad(e.to_string()))?;
    if class_device_ids.len() != spec.n_classes || tracked.len() != net.norms.len() {
        return Err(bad("class or batch-norm counts disagree with the architecture".into()));
    }
    let expected: Vec<(String, Vec<usize>)> = arrays(&net).into_iter().map(|(n, s, _)| (n, s)).collect();
    let stored: Vec<&str> = h.get_all("array").collect();
    if stored.len() != expected.len() {
        return Err(bad(format!(
            "{} arrays stored, architecture has {}",
            stored.len(),
            expected.len()
        )));
    }
    for (line, (name, shape)) in stored.iter().zip(&expected) {
        let want = format!("{name} {}", join_words(shape));
        if *line != want {
            return Err(bad(format!("array {line:?} where {want:?} was expected")));
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if blob.len() != total {
        return Err(bad(format!("{} values stored, architecture needs {total}", blob.len())));
    }

    let mut offset = 0;
    let mut take = |dst: &mut [f32]| {
        dst.copy_from_slice(&blob[offset..offset + dst.len()]);
        offset += dst.len();
    };
    for p in net.params_mut() {
        take(&mut p.value);
    }
    for (bn, t) in net.norms.iter_mut().zip(tracked) {
        take(&mut bn.running_mean);
        take(&mut bn.running_var);
        bn.tracked = t;
    }
    Ok(TrainedModel {
        network: net,
        hyper,
        log,
        class_device_ids,
    })
}

impl TrainedModel {
    /// Fails unless the stored network has the given architecture.
    pub fn ensure_architecture(&self, spec: &ModelSpec) -> Result<()> {
        if &self.network.spec != spec {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint is a {} network with {} classes, expected a {} network with {} classes \
                 (or the layer sizes differ)",
                self.network.spec.head, self.network.spec.n_classes, spec.head, spec.n_classes
            )));
        }
        Ok(())
    }

    pub fn head(&self) -> Head {
        self.network.spec.head
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::train;
    use crate::seed::rng_for;
    use rand::Rng;

    fn tiny_model() -> TrainedModel {
        let spec = ModelSpec {
            input_width: 32,
            kernel: (2, 4),
            blocks: vec![ConvBlock {
                out_channels: 2,
                dropout: 0.1,
            }],
            pool: (2, 4),
            hidden: 3,
            ..ModelSpec::full(2)
        };
        let mut rng = rng_for(&[1]);
        let xs: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let hyper = TrainHyper {
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-3,
            ..TrainHyper::default()
        };
        train(&spec, &refs, &[0, 1, 0, 1, 0, 1], vec![4, 11], &hyper).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model();
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        back.ensure_architecture(model.spec()).unwrap();
        let other = model.spec().clone().with_head(Head::Flatten);
        assert!(matches!(
            back.ensure_architecture(&other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn version_and_kind_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model();
        save_checkpoint(&path, &model).unwrap();
        let (mut h, blob) = read_container(&path).unwrap();
        let mut bumped = Header::new(KIND);
        for (k, v) in h.entries() {
            bumped.push(k.clone(), if k == "version" { "99".to_string() } else { v.clone() });
        }
        write_container(&path, &bumped, &blob).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::UnsupportedVersion(_))));

        h.kind = "features".into();
        write_container(&path, &h, &blob).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn truncated_blob_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &tiny_model()).unwrap();
        let (h, blob) = read_container(&path).unwrap();
        write_container(&path, &h, &blob[..blob.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::IncompatibleCheckpoint(_))));
    }
}
