//! Two-view augmentation producing query/key inputs.
//!
//! Each view applies, in order: square random-resized crop with bilinear
//! resampling, horizontal flip, rotation by a multiple of 90°, colour jitter
//! (brightness and contrast on every channel, saturation on RGB only) and
//! random grayscale (RGB averaged, NIR untouched). All random draws happen in
//! a fixed order so a seed key fully determines a view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tile::ImageTile;
use crate::error::{Error, Result};
use crate::numcore::SeedKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub rotation_choices: Vec<u16>,
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_range: (0.2, 1.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            rotation_choices: vec![0, 90, 180, 270],
            output_size: 32,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation at the given output size.
    pub fn identity(output_size: usize) -> Self {
        AugmentConfig {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            rotation_choices: vec![0],
            output_size,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("{path}.crop_scale_range"), "need 0 < min <= max <= 1"));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{path}.{name}"), "probability outside [0, 1]"));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("{path}.{name}"), "jitter strength outside [0, 1]"));
            }
        }
        if self.rotation_choices.is_empty() || self.rotation_choices.iter().any(|r| ![0, 90, 180, 270].contains(r)) {
            return Err(Error::config(format!("{path}.rotation_choices"), "must be a nonempty subset of {0, 90, 180, 270}"));
        }
        if self.output_size == 0 {
            return Err(Error::config(format!("{path}.output_size"), "must be positive"));
        }
        Ok(())
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| plane[y * w + x] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn jitter_factor(rng: &mut impl Rng, strength: f64) -> f64 {
    let u: f64 = rng.gen_range(-1.0..1.0);
    1.0 + strength * u
}

/// One augmented view of `tile`.
pub fn augment_view(tile: &ImageTile, cfg: &AugmentConfig, key: SeedKey) -> Result<ImageTile> {
    cfg.validate("augment")?;
    let (c, h, w) = (tile.channels(), tile.height(), tile.width());
    let out = cfg.output_size;
    if h.min(w) < out {
        return Err(Error::InvalidArgument(format!(
            "tile {h}x{w} smaller than output size {out}"
        )));
    }
    let mut rng = key.rng();
    let scale = rng.gen_range(cfg.crop_scale_range.0..=cfg.crop_scale_range.1);
    let fy: f64 = rng.gen();
    let fx: f64 = rng.gen();
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let rot = cfg.rotation_choices[rng.gen_range(0..cfg.rotation_choices.len())];
    let fb = jitter_factor(&mut rng, cfg.brightness);
    let fc = jitter_factor(&mut rng, cfg.contrast);
    let fs = jitter_factor(&mut rng, cfg.saturation);
    let gray = rng.gen::<f64>() < cfg.grayscale_prob;

    let side = (scale * (h * w) as f64).sqrt().min(h.min(w) as f64);
    if side < 1.0 {
        return Err(Error::InvalidArgument(format!("degenerate crop: side {side:.3} px")));
    }
    let y0 = fy * (h as f64 - side);
    let x0 = fx * (w as f64 - side);
    let step = side / out as f64;

    let mut planes = vec![vec![0.0f64; out * out]; c];
    for (ch, dst) in planes.iter_mut().enumerate() {
        let src = tile.plane(ch);
        for i in 0..out {
            let sy = y0 + (i as f64 + 0.5) * step - 0.5;
            for j in 0..out {
                let sx = x0 + (j as f64 + 0.5) * step - 0.5;
                dst[i * out + j] = bilinear(src, h, w, sy, sx);
            }
        }
    }
    if flip {
        for p in planes.iter_mut() {
            for row in p.chunks_mut(out) {
                row.reverse();
            }
        }
    }
    for _ in 0..rot / 90 {
        for p in planes.iter_mut() {
            // counter-clockwise quarter turn of a square plane
            let src = p.clone();
            for i in 0..out {
                for j in 0..out {
                    p[i * out + j] = src[j * out + (out - 1 - i)];
                }
            }
        }
    }
    if fb != 1.0 {
        planes.iter_mut().flatten().for_each(|v| *v *= fb);
    }
    if fc != 1.0 {
        for p in planes.iter_mut() {
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            p.iter_mut().for_each(|v| *v = mean + fc * (*v - mean));
        }
    }
    if fs != 1.0 {
        for i in 0..out * out {
            let g = (planes[0][i] + planes[1][i] + planes[2][i]) / 3.0;
            for p in planes.iter_mut().take(3) {
                p[i] = g + fs * (p[i] - g);
            }
        }
    }
    if gray {
        for i in 0..out * out {
            let g = (planes[0][i] + planes[1][i] + planes[2][i]) / 3.0;
            for p in planes.iter_mut().take(3) {
                p[i] = g;
            }
        }
    }
    let data = planes.into_iter().flatten().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    ImageTile::new(c, out, out, data)
}

/// Query and key views of one tile; both are determined by `key`.
pub fn augment_pair(tile: &ImageTile, cfg: &AugmentConfig, key: SeedKey) -> Result<(ImageTile, ImageTile)> {
    Ok((
        augment_view(tile, cfg, key.derive("query"))?,
        augment_view(tile, cfg, key.derive("key"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pattern(c: usize, h: usize, w: usize) -> ImageTile {
        let n = c * h * w;
        ImageTile::new(c, h, w, (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap()
    }

    #[test]
    fn identity_config_reproduces_the_input() {
        let t = pattern(4, 8, 8);
        let (q, k) = augment_pair(&t, &AugmentConfig::identity(8), SeedKey::root(3)).unwrap();
        assert_eq!(q, t);
        assert_eq!(k, t);
    }

    #[test]
    fn same_key_same_views() {
        let t = pattern(3, 16, 16);
        let cfg = AugmentConfig {
            output_size: 8,
            ..AugmentConfig::default()
        };
        let a = augment_pair(&t, &cfg, SeedKey::root(5).index(2)).unwrap();
        let b = augment_pair(&t, &cfg, SeedKey::root(5).index(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
    }

    #[test]
    fn certain_flip_mirrors_a_two_by_two_pattern() {
        // [[a, b], [c, d]] on every channel must become [[b, a], [d, c]].
        let plane = [0.1f32, 0.2, 0.3, 0.4];
        let t = ImageTile::new(3, 2, 2, plane.repeat(3)).unwrap();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity(2)
        };
        let (q, _) = augment_pair(&t, &cfg, SeedKey::root(0)).unwrap();
        for ch in 0..3 {
            assert_eq!(q.plane(ch), &[0.2, 0.1, 0.4, 0.3]);
        }
    }

    #[test]
    fn quarter_turn_on_two_by_two() {
        let t = ImageTile::new(3, 2, 2, [0.1f32, 0.2, 0.3, 0.4].repeat(3)).unwrap();
        let cfg = AugmentConfig {
            rotation_choices: vec![90],
            ..AugmentConfig::identity(2)
        };
        let v = augment_view(&t, &cfg, SeedKey::root(0)).unwrap();
        // counter-clockwise: top row becomes [b, d]
        assert_eq!(v.plane(0), &[0.2, 0.4, 0.1, 0.3]);
    }

    #[test]
    fn grayscale_averages_rgb_and_keeps_nir() {
        let t = pattern(4, 4, 4);
        let cfg = AugmentConfig {
            grayscale_prob: 1.0,
            ..AugmentConfig::identity(4)
        };
        let v = augment_view(&t, &cfg, SeedKey::root(1)).unwrap();
        for i in 0..16 {
            let g = ((t.plane(0)[i] as f64 + t.plane(1)[i] as f64 + t.plane(2)[i] as f64) / 3.0) as f32;
            assert_eq!(v.plane(0)[i], g);
            assert_eq!(v.plane(1)[i], g);
            assert_eq!(v.plane(2)[i], g);
        }
        assert_eq!(v.plane(3), t.plane(3));
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        let t = pattern(3, 4, 4);
        let cfg = AugmentConfig {
            crop_scale_range: (0.01, 0.01),
            ..AugmentConfig::identity(1)
        };
        assert!(augment_view(&t, &cfg, SeedKey::root(0)).is_err());
    }

    proptest! {
        #[test]
        fn views_stay_in_unit_range(seed in any::<u64>()) {
            let t = pattern(4, 12, 12);
            let cfg = AugmentConfig {
                brightness: 1.0,
                contrast: 1.0,
                saturation: 1.0,
                output_size: 6,
                ..AugmentConfig::default()
            };
            let (q, k) = augment_pair(&t, &cfg, SeedKey::root(seed)).unwrap();
            prop_assert!(q.data().iter().chain(k.data()).all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(q.height(), 6);
            prop_assert_eq!(q.channels(), 4);
        }
    }
}
