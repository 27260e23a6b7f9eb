//! Dataset manifests: a JSON array of `{path, label, split}` with paths
//! relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use psumnet_core::skeleton::{ActionSequence, SkeletonTopology};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skj::read_skj;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSplit {
    Train,
    Val,
    Test,
}

impl DataSplit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?} (train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub split: DataSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if entries.is_empty() {
        return Err(Error::format(path, "manifest lists no sequences"));
    }
    Ok(Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    })
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Marks every fifth sample of each class (in manifest order) for
/// validation.
pub fn stratified_holdout(labels: &[usize]) -> Vec<bool> {
    let mut seen = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let k = seen.entry(*l).or_insert(0usize);
            *k += 1;
            *k % 5 == 0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<ActionSequence>,
    pub val: Vec<ActionSequence>,
    pub test: Vec<ActionSequence>,
}

impl Splits {
    pub fn get(&self, split: DataSplit) -> &[ActionSequence] {
        match split {
            DataSplit::Train => &self.train,
            DataSplit::Val => &self.val,
            DataSplit::Test => &self.test,
        }
    }
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    fn load_entry(&self, e: &ManifestEntry, topology: &SkeletonTopology) -> Result<ActionSequence> {
        let path = self.resolve(e);
        let (_, seq) = read_skj(&path, Some(topology))?;
        if seq.label != e.label {
            return Err(Error::format(
                &path,
                format!("file label {} but manifest says {}", seq.label, e.label),
            ));
        }
        Ok(seq)
    }

    /// Loads every sequence. Without any `val` entries, a stratified fifth
    /// of the training entries becomes the validation split.
    pub fn load(&self, topology: &SkeletonTopology) -> Result<Splits> {
        let mut splits = Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let has_val = self.entries.iter().any(|e| e.split == DataSplit::Val);
        let train_labels: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.split == DataSplit::Train)
            .map(|e| e.label)
            .collect();
        let mut holdout = stratified_holdout(&train_labels).into_iter();
        for e in &self.entries {
            let seq = self.load_entry(e, topology)?;
            match e.split {
                DataSplit::Train => {
                    let to_val = holdout.next().unwrap_or(false) && !has_val;
                    if to_val {
                        splits.val.push(seq);
                    } else {
                        splits.train.push(seq);
                    }
                }
                DataSplit::Val => splits.val.push(seq),
                DataSplit::Test => splits.test.push(seq),
            }
        }
        Ok(splits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_is_a_stratified_fifth() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let h = stratified_holdout(&labels);
        for c in 0..3 {
            let n = labels.iter().zip(&h).filter(|(&l, &v)| l == c && v).count();
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn missing_manifest_names_the_path() {
        let err = load_manifest(Path::new("/nonexistent/m.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/m.json"));
        assert_eq!(err.exit_code(), 1);
    }
}
