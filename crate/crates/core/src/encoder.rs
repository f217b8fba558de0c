//! Convolutional backbone with a two-layer projector.
//!
//! The backbone is a stride-1 stem followed by one stride-2 stage per entry
//! of `stage_widths`; global average pooling makes the feature dimension
//! independent of the input size. The projector is `linear → relu → linear`
//! and its output is L2-normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnUpdate, ConvBnRelu, Linear, Mode};
use crate::numcore::{Bound, Graph, ParamStore, SeedKey, Tensor, Var};

pub const STEM_WEIGHT: &str = "encoder.stem.conv.weight";
/// Input channel that holds the red band.
pub const RED_CHANNEL: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 4,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            feature_dim: 128,
            projection_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(3..=4).contains(&self.in_channels) {
            return Err(Error::config(format!("{path}.in_channels"), "must be 3 or 4"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::config(format!("{path}.stage_widths"), "must be nonempty and positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config(format!("{path}.blocks_per_stage"), "must be at least 1"));
        }
        if self.feature_dim != *self.stage_widths.last().expect("nonempty") {
            return Err(Error::config(format!("{path}.feature_dim"), "must equal the last stage width"));
        }
        if self.projection_dim == 0 {
            return Err(Error::config(format!("{path}.projection_dim"), "must be positive"));
        }
        Ok(())
    }

    /// Trainable scalar count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let conv_bn = |i: usize, o: usize| o * i * 9 + 2 * o;
        let w = &self.stage_widths;
        let mut n = conv_bn(self.in_channels, w[0]);
        let mut prev = w[0];
        for &width in w {
            n += conv_bn(prev, width) + (self.blocks_per_stage - 1) * conv_bn(width, width);
            prev = width;
        }
        let f = self.feature_dim;
        n + (f * f + f) + (self.projection_dim * f + self.projection_dim)
    }
}

/// Backbone feature maps, from full resolution down.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    /// `[stem, stage 1, …, stage S]`; stage `i` is downsampled by `2^i`.
    pub maps: Vec<Var>,
    /// `[B, feature_dim]` after global average pooling.
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    stem: ConvBnRelu,
    stages: Vec<Vec<ConvBnRelu>>,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderModel {
    fn layout<F>(config: &EncoderConfig, mut make: F) -> Result<Self>
    where
        F: FnMut(Block) -> Result<BlockOut>,
    {
        config.validate("encoder")?;
        let conv = |b: BlockOut| match b {
            BlockOut::Conv(c) => c,
            BlockOut::Linear(_) => unreachable!("conv block"),
        };
        let lin = |b: BlockOut| match b {
            BlockOut::Linear(l) => l,
            BlockOut::Conv(_) => unreachable!("linear block"),
        };
        let w = &config.stage_widths;
        let stem = conv(make(Block::Conv {
            name: "encoder.stem".into(),
            in_ch: config.in_channels,
            out_ch: w[0],
            stride: 1,
        })?);
        let mut stages = Vec::with_capacity(w.len());
        let mut prev = w[0];
        for (s, &width) in w.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                blocks.push(conv(make(Block::Conv {
                    name: format!("encoder.stage{}.block{}", s + 1, b + 1),
                    in_ch: if b == 0 { prev } else { width },
                    out_ch: width,
                    stride: if b == 0 { 2 } else { 1 },
                })?));
            }
            stages.push(blocks);
            prev = width;
        }
        let f = config.feature_dim;
        let fc1 = lin(make(Block::Linear {
            name: "projector.fc1".into(),
            in_dim: f,
            out_dim: f,
        })?);
        let fc2 = lin(make(Block::Linear {
            name: "projector.fc2".into(),
            in_dim: f,
            out_dim: config.projection_dim,
        })?);
        Ok(EncoderModel {
            config: config.clone(),
            stem,
            stages,
            fc1,
            fc2,
        })
    }

    /// Registers freshly initialized parameters under `encoder.*` and
    /// `projector.*`.
    pub fn register(config: &EncoderConfig, store: &mut ParamStore, key: SeedKey) -> Result<Self> {
        Self::layout(config, |b| match b {
            Block::Conv { name, in_ch, out_ch, stride } => {
                ConvBnRelu::register(store, &name, in_ch, out_ch, 3, stride, key).map(BlockOut::Conv)
            }
            Block::Linear { name, in_dim, out_dim } => {
                Linear::register(store, &name, in_dim, out_dim, key).map(BlockOut::Linear)
            }
        })
    }

    /// Binds to parameters already present in `store`.
    pub fn attach(config: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        Self::layout(config, |b| match b {
            Block::Conv { name, in_ch, out_ch, stride } => {
                ConvBnRelu::attach(store, &name, in_ch, out_ch, 3, stride).map(BlockOut::Conv)
            }
            Block::Linear { name, in_dim, out_dim } => Linear::attach(store, &name, in_dim, out_dim).map(BlockOut::Linear),
        })
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.in_channels, 0, 0],
            });
        }
        Ok(())
    }

    /// Stem convolution output before normalization.
    pub fn stem_conv(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        self.stem.conv(g, p, x)
    }

    pub fn forward_features(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<FeatureMaps> {
        self.check_input(g, x)?;
        let mut h = self.stem.forward(g, p, x, mode, updates)?;
        let mut maps = vec![h];
        for stage in &self.stages {
            for block in stage {
                h = block.forward(g, p, h, mode, updates)?;
            }
            maps.push(h);
        }
        let pooled = g.global_avg_pool(h)?;
        Ok(FeatureMaps { maps, pooled })
    }

    /// Projector applied to pooled features; rows are L2-normalized.
    pub fn project(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, features)?;
        let h = g.relu(h);
        let z = self.fc2.forward(g, p, h)?;
        g.l2_normalize(z)
    }

    pub fn forward_projection(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let f = self.forward_features(g, p, x, mode, updates)?;
        self.project(g, p, f.pooled)
    }

    /// Channel widths of the maps returned by [`Self::forward_features`].
    pub fn map_widths(&self) -> Vec<usize> {
        let mut out = vec![self.config.stage_widths[0]];
        out.extend_from_slice(&self.config.stage_widths);
        out
    }
}

enum Block {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
    Linear {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
}

enum BlockOut {
    Conv(ConvBnRelu),
    Linear(Linear),
}

/// Widens a 3-channel stem kernel `[W, 3, k, k]` to `[W, 4, k, k]`; the new
/// fourth (NIR) input channel copies the red channel's weights.
pub fn expand_input_channels(weights: &Tensor) -> Result<Tensor> {
    let s = weights.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::InvalidShape {
            op: "expand_input_channels",
            shape: s.to_vec(),
            reason: "expected [W, 3, k, k]".into(),
        });
    }
    let (w, kk) = (s[0], s[2] * s[3]);
    let mut out = Vec::with_capacity(w * 4 * kk);
    for o in 0..w {
        let filt = &weights.data()[o * 3 * kk..(o + 1) * 3 * kk];
        out.extend_from_slice(filt);
        out.extend_from_slice(&filt[RED_CHANNEL * kk..(RED_CHANNEL + 1) * kk]);
    }
    Tensor::new([w, 4, s[2], s[3]], out)
}

/// Converts a 3-channel encoder's parameters in place to accept RGB+NIR input.
pub fn expand_store_to_nir(config: &EncoderConfig, store: &mut ParamStore) -> Result<EncoderConfig> {
    if config.in_channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "encoder already has {} input channels",
            config.in_channels
        )));
    }
    let id = store.id(STEM_WEIGHT).ok_or_else(|| Error::StructureMismatch {
        path: STEM_WEIGHT.into(),
        reason: "parameter not found".into(),
    })?;
    let expanded = expand_input_channels(store.value(id))?;
    *store.value_mut(id) = expanded;
    Ok(EncoderConfig {
        in_channels: 4,
        ..config.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Precision;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            in_channels: 4,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            feature_dim: 8,
            projection_dim: 6,
        }
    }

    fn build(cfg: &EncoderConfig) -> (EncoderModel, ParamStore) {
        let mut store = ParamStore::new();
        let m = EncoderModel::register(cfg, &mut store, SeedKey::root(1)).unwrap();
        (m, store)
    }

    fn run(model: &EncoderModel, store: &ParamStore, x: Tensor, project: bool) -> Tensor {
        let mut g = Graph::new(Precision::F64);
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let mut up = Vec::new();
        let out = if project {
            model.forward_projection(&mut g, &p, xv, Mode::Eval, &mut up).unwrap()
        } else {
            model.forward_features(&mut g, &p, xv, Mode::Eval, &mut up).unwrap().pooled
        };
        g.value(out).clone()
    }

    #[test]
    fn feature_shape_ignores_spatial_size() {
        let cfg = tiny();
        let (m, s) = build(&cfg);
        let a = run(&m, &s, Tensor::zeros([2, 4, 8, 8]), false);
        let b = run(&m, &s, Tensor::zeros([2, 4, 16, 16]), false);
        assert_eq!(a.shape(), &[2, 8]);
        assert_eq!(b.shape(), &[2, 8]);
        assert!(a.all_finite());
        assert_eq!(a.row(0), a.row(1));
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let cfg = tiny();
        let (m, s) = build(&cfg);
        let x = Tensor::from_fn([3, 4, 8, 8], |i| ((i * 13) % 17) as f64 / 17.0);
        let z = run(&m, &s, x, true);
        for i in 0..3 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let (m, s) = build(&tiny());
        let mut g = Graph::new(Precision::F64);
        let p = s.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros([1, 3, 8, 8]));
        assert!(m.forward_features(&mut g, &p, x, Mode::Eval, &mut Vec::new()).is_err());
    }

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [tiny(), EncoderConfig::default()] {
            let (_, s) = build(&cfg);
            assert_eq!(s.trainable_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn expansion_copies_red_into_fourth_slice() {
        let w = Tensor::from_fn([2, 3, 1, 1], |i| if i % 3 == 0 { 1.0 } else { i as f64 });
        let e = expand_input_channels(&w).unwrap();
        assert_eq!(e.shape(), &[2, 4, 1, 1]);
        assert_eq!(e.data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 4.0, 5.0, 1.0]);
        assert!(expand_input_channels(&e).is_err());
    }
}
