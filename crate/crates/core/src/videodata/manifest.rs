use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_clip, VideoClip, VideoError};

/// One record of the on-disk manifest array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<usize>,
    pub frames: usize,
}

/// Clip list plus the sampling geometry used to read from it.
///
/// Only `entries` is persisted; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
    pub stride: usize,
    pub clip_len: usize,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>, stride: usize, clip_len: usize) -> Self {
        Self { entries, root: root.into(), stride, clip_len }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VideoError> {
        fs::write(path, serde_json::to_string_pretty(&self.entries)?)?;
        Ok(())
    }

    /// Reads and validates a manifest; the root is the file's directory.
    pub fn load(path: impl AsRef<Path>, stride: usize, clip_len: usize) -> Result<Self, VideoError> {
        let path = path.as_ref();
        let entries: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::new(entries, root, stride, clip_len);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        for e in &self.entries {
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(VideoError::MissingClip(p));
            }
        }
        let labels: BTreeSet<usize> = self.entries.iter().filter_map(|e| e.label).collect();
        if let Some(&max) = labels.last() {
            if labels.len() != max + 1 {
                return Err(VideoError::Manifest(format!("labels {labels:?} are not contiguous from 0")));
            }
            if self.entries.iter().any(|e| e.label.is_none()) {
                return Err(VideoError::Manifest("some entries are labelled and some are not".into()));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.entries.iter().filter_map(|e| e.label).max().map(|m| m + 1)
    }

    pub fn is_labelled(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.label.is_some())
    }

    pub fn load_clip(&self, index: usize) -> Result<VideoClip, VideoError> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| VideoError::Manifest(format!("entry {index} of {}", self.entries.len())))?;
        load_clip(self.resolve(entry))
    }
}
