//! A dataset is a directory of captures listed by `manifest.txt`.
//!
//! Each manifest row is `<device_id> <relative path>`; a device may appear on
//! several rows (one per recording session).

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::capture::{read_capture, Capture};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub device_id: u32,
    /// Relative to the dataset root.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, rel) = line.split_once(char::is_whitespace).ok_or_else(|| {
                Error::format(&manifest, format!("line {}: expected `<device_id> <path>`", lineno + 1))
            })?;
            let device_id = id
                .parse()
                .map_err(|e| Error::format(&manifest, format!("line {}: {e}", lineno + 1)))?;
            entries.push(ManifestEntry {
                device_id,
                path: PathBuf::from(rel.trim()),
            });
        }
        Ok(Dataset { root, entries })
    }

    pub fn write_manifest(&self) -> Result<()> {
        let manifest = self.root.join(MANIFEST_FILE);
        let mut text = String::from("# device_id path\n");
        for e in &self.entries {
            text.push_str(&format!("{} {}\n", e.device_id, e.path.display()));
        }
        fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
    }

    /// Sorted, de-duplicated device ids.
    pub fn device_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.device_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Loads every capture of `device_id` in manifest order.
    pub fn captures_for(&self, device_id: u32) -> Result<Vec<Capture>> {
        self.entries
            .iter()
            .filter(|e| e.device_id == device_id)
            .map(|e| {
                let cap = read_capture(self.root.join(&e.path))?;
                if cap.device_id != device_id {
                    return Err(Error::format(
                        self.root.join(&e.path),
                        format!("manifest says device {device_id}, sidecar says {}", cap.device_id),
                    ));
                }
                Ok(cap)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            root: dir.path().to_path_buf(),
            entries: vec![
                ManifestEntry {
                    device_id: 2,
                    path: "dev02.iq".into(),
                },
                ManifestEntry {
                    device_id: 0,
                    path: "dev00.iq".into(),
                },
                ManifestEntry {
                    device_id: 2,
                    path: "dev02_s1.iq".into(),
                },
            ],
        };
        ds.write_manifest().unwrap();
        let back = Dataset::open(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.device_ids(), vec![0, 2]);
    }
}
