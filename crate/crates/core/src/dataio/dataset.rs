use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{SynthSpec, Task};
use super::tile::{read_mask, read_tile, ImageTile, MaskTile};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.jsonl";
pub const DATASET_INFO: &str = "dataset.json";

/// One line of `index.jsonl`. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub tile: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub spec: SynthSpec,
    pub provenance: serde_json::Value,
}

/// A fully loaded sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tile: ImageTile,
    pub mask: Option<MaskTile>,
    pub label: Option<u32>,
}

/// An in-memory dataset read from an index directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: Option<DatasetInfo>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path)
            .map_err(|e| Error::io(format!("reading {}", index_path.display()), e))?;
        let mut samples = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            if !line.trim().is_empty() {
                let rec: IndexRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: index_path.clone(),
                    offset,
                    reason: e.to_string(),
                })?;
                let tile = read_tile(&dir.join(&rec.tile))?;
                let mask = match &rec.mask {
                    Some(m) => {
                        let mask = read_mask(&dir.join(m))?;
                        if mask.height() != tile.height() || mask.width() != tile.width() {
                            return Err(Error::ShapeMismatch {
                                op: "dataset mask",
                                lhs: vec![tile.height(), tile.width()],
                                rhs: vec![mask.height(), mask.width()],
                            });
                        }
                        Some(mask)
                    }
                    None => None,
                };
                samples.push(Sample {
                    tile,
                    mask,
                    label: rec.label,
                });
            }
            offset += line.len() as u64 + 1;
        }
        let info_path = dir.join(DATASET_INFO);
        let info = if info_path.exists() {
            let t = fs::read_to_string(&info_path)
                .map_err(|e| Error::io(format!("reading {}", info_path.display()), e))?;
            Some(serde_json::from_str(&t).map_err(|e| Error::json(info_path.display().to_string(), e))?)
        } else {
            None
        };
        Ok(Dataset {
            root: dir.to_path_buf(),
            info,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tiles(&self) -> impl Iterator<Item = &ImageTile> {
        self.samples.iter().map(|s| &s.tile)
    }

    /// Number of classes: from the recorded generator parameters when present, else from
    /// the labels.
    pub fn n_classes(&self) -> usize {
        if let Some(info) = &self.info {
            return match info.spec.task {
                Task::Classification => info.spec.n_classes,
                Task::Segmentation => info.spec.n_classes + 1,
            };
        }
        self.samples.iter().filter_map(|s| s.label).max().map_or(0, |m| m as usize + 1)
    }

    /// Sample indices grouped by label, in index order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(l) = s.label {
                if l as usize >= out.len() {
                    out.resize(l as usize + 1, Vec::new());
                }
                out[l as usize].push(i);
            }
        }
        out
    }

    pub fn channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.tile.channels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::synth_dataset;

    fn spec(task: Task, n_classes: usize, per: usize) -> SynthSpec {
        SynthSpec {
            n_classes,
            n_per_class: per,
            channels: 4,
            size: 16,
            seed: 11,
            task,
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "tiles", "masks"] {
            let d = dir.join(sub);
            if !d.is_dir() {
                continue;
            }
            let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
            names.sort();
            for p in names {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn classification_index_is_balanced() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&spec(Task::Classification, 3, 100), dir.path(), serde_json::json!({})).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 300);
        let groups = ds.by_class();
        assert_eq!(groups.len(), 3);
        assert!(groups.iter().all(|g| g.len() == 100));
    }

    #[test]
    fn same_seed_gives_identical_directories() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = spec(Task::Segmentation, 3, 4);
        synth_dataset(&s, a.path(), serde_json::json!({"seed": 11})).unwrap();
        synth_dataset(&s, b.path(), serde_json::json!({"seed": 11})).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn segmentation_masks_use_only_declared_values() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&spec(Task::Segmentation, 3, 20), dir.path(), serde_json::json!({})).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.n_classes(), 4);
        let mut seen = std::collections::BTreeSet::new();
        for s in &ds.samples {
            let m = s.mask.as_ref().unwrap();
            seen.extend(m.data().iter().copied());
        }
        assert!(seen.iter().all(|v| [0, 1, 2, 3, 255].contains(v)), "{seen:?}");
        assert!(seen.contains(&0) && seen.contains(&255));
    }

    #[test]
    fn too_few_classes_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_dataset(&spec(Task::Classification, 1, 5), dir.path(), serde_json::json!({})).is_err());
    }
}
