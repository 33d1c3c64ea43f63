//! On-disk formats: captures, datasets, feature caches, checkpoints.
//!
//! All binary payloads are little-endian regardless of host.

mod capture;
mod checkpoint;
mod container;
mod dataset;

pub(crate) use capture::ensure_parent;
pub use capture::{meta_path, read_capture, write_capture, Capture, CaptureMeta, CaptureSource, MIN_CAPTURE_SAMPLES};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub(crate) use container::{join_words, parse_words};
pub use container::{read_container, write_container, Header};
pub use dataset::{Dataset, ManifestEntry, MANIFEST_FILE};
