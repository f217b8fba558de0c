//! Deterministic procedural corpora.
//!
//! Classification tiles are oriented stripe textures overlaid with Gaussian
//! blobs; stripe frequency, orientation and blob scale are class specific.
//! Segmentation tiles paint one to four coloured shapes over a textured
//! background and label them by class, with background as class 0.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetInfo, IndexRecord, DATASET_INFO, INDEX_FILE};
use super::tile::{write_mask, write_tile, ImageTile, MaskTile, IGNORE};
use crate::error::{Error, Result};
use crate::numcore::SeedKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

/// Parameters of a synthetic corpus.
///
/// For segmentation, `n_classes` counts foreground classes; masks use
/// `0..=n_classes` with 0 as background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    pub task: Task,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("data.n_classes", "must be at least 2"));
        }
        if !(3..=4).contains(&self.channels) {
            return Err(Error::config("data.channels", "must be 3 or 4"));
        }
        if self.size < 4 {
            return Err(Error::config("data.size", "must be at least 4"));
        }
        if self.task == Task::Segmentation && self.n_classes > 254 {
            return Err(Error::config("data.n_classes", "too many classes for u8 masks"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_classes * self.n_per_class
    }
}

pub struct Generated {
    pub tile: ImageTile,
    pub mask: Option<MaskTile>,
    pub label: Option<u32>,
}

/// Produces sample `index` of the corpus without touching the filesystem.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<Generated> {
    let mut rng = SeedKey::root(spec.seed).derive("synth").index(index as u64).rng();
    match spec.task {
        Task::Classification => {
            let class = index / spec.n_per_class.max(1);
            let tile = texture_tile(spec, class, &mut rng)?;
            Ok(Generated {
                tile,
                mask: None,
                label: Some(class as u32),
            })
        }
        Task::Segmentation => {
            let (tile, mask) = shapes_tile(spec, &mut rng)?;
            Ok(Generated {
                tile,
                mask: Some(mask),
                label: None,
            })
        }
    }
}

/// Writes the corpus under `dir` together with `index.jsonl` and a
/// `dataset.json` provenance record.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path, provenance: serde_json::Value) -> Result<()> {
    spec.validate()?;
    let io = |what: &str, e| Error::io(format!("{what} under {}", dir.display()), e);
    fs::create_dir_all(dir.join("tiles")).map_err(|e| io("creating tiles/", e))?;
    if spec.task == Task::Segmentation {
        fs::create_dir_all(dir.join("masks")).map_err(|e| io("creating masks/", e))?;
    }
    let mut index = String::new();
    for i in 0..spec.total() {
        let sample = generate_sample(spec, i)?;
        let tile_rel = format!("tiles/{i:06}.tile");
        write_tile(&sample.tile, &dir.join(&tile_rel))?;
        let mask_rel = match &sample.mask {
            Some(m) => {
                let rel = format!("masks/{i:06}.mask");
                write_mask(m, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let rec = IndexRecord {
            tile: tile_rel,
            mask: mask_rel,
            label: sample.label,
        };
        index.push_str(&serde_json::to_string(&rec).map_err(|e| Error::json("index record", e))?);
        index.push('\n');
    }
    fs::write(dir.join(INDEX_FILE), index).map_err(|e| io("writing index", e))?;
    let info = DatasetInfo {
        spec: spec.clone(),
        provenance,
    };
    let text = serde_json::to_string_pretty(&info).map_err(|e| Error::json("dataset info", e))?;
    fs::write(dir.join(DATASET_INFO), text + "\n").map_err(|e| io("writing dataset info", e))
}

fn to_tile(spec: &SynthSpec, planes: Vec<Vec<f64>>) -> Result<ImageTile> {
    let data = planes
        .into_iter()
        .take(spec.channels)
        .flatten()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    ImageTile::new(spec.channels, spec.size, spec.size, data)
}

fn texture_tile(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<ImageTile> {
    let s = spec.size;
    let frac = class as f64 / (spec.n_classes - 1) as f64;
    let theta = class as f64 * (PI / 2.0) / spec.n_classes as f64 + rng.gen_range(-0.15..0.15);
    let freq = (0.05 + 0.33 * frac) * rng.gen_range(0.92..1.08);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let sigma = s as f64 * (0.22 - 0.14 * frac);
    let n_blobs = 2 + (4.0 * frac).round() as usize;
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let amp = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (rng.gen_range(0.0..s as f64), rng.gen_range(0.0..s as f64), amp)
        })
        .collect();
    let noise = Normal::new(0.0, 0.04).expect("valid normal");
    let (ct, st) = (theta.cos(), theta.sin());
    let mut base = vec![0.0; s * s];
    let mut blob_field = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64, y as f64);
            blob_field[y * s + x] = blobs
                .iter()
                .map(|(bx, by, a)| a * (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * sigma * sigma)).exp())
                .sum::<f64>();
            base[y * s + x] = (2.0 * PI * freq * (xf * ct + yf * st) + phase).sin();
        }
    }
    let peak = blob_field.iter().fold(1e-9_f64, |m, v| m.max(v.abs()));
    for (b, f) in base.iter_mut().zip(&blob_field) {
        *b = 0.5 + 0.22 * *b + 0.18 * f / peak + noise.sample(rng);
    }
    let mut planes = Vec::with_capacity(4);
    for _ in 0..3 {
        let tint = rng.gen_range(0.7..1.0);
        let offset = rng.gen_range(-0.1..0.1);
        planes.push(base.iter().map(|v| tint * v + offset).collect());
    }
    let nir_gain = rng.gen_range(0.8..1.0);
    planes.push(base.iter().map(|v| 0.2 + 0.6 * v * nir_gain).collect());
    to_tile(spec, planes)
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}

fn shapes_tile(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(ImageTile, MaskTile)> {
    let s = spec.size;
    let sf = s as f64;
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    let bg_freq = rng.gen_range(0.03..0.08);
    let bg_theta = rng.gen_range(0.0..PI);
    let mut planes = vec![vec![0.0; s * s]; 4];
    for y in 0..s {
        for x in 0..s {
            let t = (2.0 * PI * bg_freq * (x as f64 * bg_theta.cos() + y as f64 * bg_theta.sin())).sin();
            let i = y * s + x;
            planes[0][i] = 0.35 + 0.05 * t + noise.sample(rng);
            planes[1][i] = 0.45 + 0.05 * t + noise.sample(rng);
            planes[2][i] = 0.30 + 0.05 * t + noise.sample(rng);
            planes[3][i] = 0.55 + 0.05 * t + noise.sample(rng);
        }
    }
    let mut mask = vec![0u8; s * s];
    let n_shapes = rng.gen_range(1..=4);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..=spec.n_classes);
        let kind = (class - 1) % 3;
        let rgb = hue_rgb((class - 1) as f64 / spec.n_classes as f64);
        let shade = rng.gen_range(0.85..1.0);
        let nir = 0.1 + 0.8 * class as f64 / spec.n_classes as f64;
        let r = rng.gen_range(0.12 * sf..0.25 * sf);
        let cx = rng.gen_range(0.0..sf);
        let cy = rng.gen_range(0.0..sf);
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match kind {
                    0 => dx.abs() <= r && dy.abs() <= 0.7 * r,
                    1 => dx * dx + dy * dy <= r * r,
                    _ => dy <= 0.6 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
                };
                if inside {
                    let i = y * s + x;
                    for c in 0..3 {
                        planes[c][i] = 0.1 + 0.8 * rgb[c] * shade + noise.sample(rng);
                    }
                    planes[3][i] = nir + noise.sample(rng);
                    mask[i] = class as u8;
                }
            }
        }
    }
    // Occasional unlabelled damage patch, excluded from training and scoring.
    if rng.gen_bool(0.25) {
        let w = rng.gen_range(2..=(s / 6).max(2));
        let h = rng.gen_range(2..=(s / 6).max(2));
        let x0 = rng.gen_range(0..s - w);
        let y0 = rng.gen_range(0..s - h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let i = y * s + x;
                planes[0][i] = 0.45;
                planes[1][i] = 0.3;
                planes[2][i] = 0.15;
                mask[i] = IGNORE;
            }
        }
    }
    Ok((to_tile(spec, planes)?, MaskTile::new(s, s, mask)?))
}
