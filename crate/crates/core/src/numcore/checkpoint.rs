//! Directory checkpoints: `manifest.json` plus one raw little-endian,
//! row-major binary file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Free-form provenance and configuration (resolved config, seed, counters).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:04}_{clean}.bin")
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = (String, Tensor)>) {
        self.tensors.extend(items);
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Writes the checkpoint, replacing any existing directory contents.
    pub fn save(&self, dir: &Path, precision: Precision) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = file_name(i, name);
            let bytes: Vec<u8> = match precision {
                Precision::F32 => t.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
                Precision::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            };
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: precision.dtype().to_string(),
                file,
            });
        }
        let manifest = Manifest {
            format: "genco-checkpoint".into(),
            version: 1,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            let file: PathBuf = dir.join(&entry.file);
            let bytes = fs::read(&file).map_err(|e| Error::io(format!("reading {}", file.display()), e))?;
            let n: usize = entry.shape.iter().product();
            let width = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => {
                    return Err(Error::Parse {
                        path: file,
                        offset: 0,
                        reason: format!("unknown dtype {other}"),
                    })
                }
            };
            if bytes.len() != n * width {
                return Err(Error::Parse {
                    path: file,
                    offset: bytes.len().min(n * width) as u64,
                    reason: format!("expected {} bytes, found {}", n * width, bytes.len()),
                });
            }
            let data = if width == 4 {
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            };
            tensors.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }
}
