//! Segmentation fine-tuning: a five-stage upsampling decoder over the
//! frozen encoder's feature maps.
//!
//! The bottleneck is the last encoder map max-pooled by two (1/32 of the
//! input). Each decoder layer upsamples by two with a 2×2 stride-2
//! transposed convolution that halves the channel count. The encoder map of
//! matching resolution is concatenated on and a 3×3 convolution with ReLU
//! follows. A 1×1 convolution produces class logits.
//!
//! With enrichment the generator perturbs the pooled, normalized bottleneck
//! vector; the perturbation, rescaled to the vector's norm, is added to
//! every bottleneck position and the perturbed copy is decoded alongside the
//! original with the same mask.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::classify::{backbone_fingerprint, copy_generator};
use super::episode::SegmentationSplit;
use super::metrics::{argmax_channels, miou, MiouReport};
use crate::dataio::{tiles_to_tensor, Dataset, MaskTile, IGNORE};
use crate::error::{Error, Result};
use crate::genco::{sample_noise, Generator};
use crate::nn::Mode;
use crate::numcore::{Bound, Graph, Optimizer, OptimizerKind, ParamId, ParamStore, Precision, SeedKey, Tensor, Var};
use crate::pretrain::Pretrained;

pub const DECODER_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Fraction of steps spent warming up to `peak_lr`.
    pub warmup_frac: f64,
    /// The schedule starts at `peak_lr / initial_div`.
    pub initial_div: f64,
    /// The schedule ends at `peak_lr / final_div`.
    pub final_div: f64,
    /// Held-out tiles scored after training.
    pub eval_tiles: usize,
    pub enrich: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            peak_lr: 1e-2,
            weight_decay: 0.01,
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 4,
            warmup_frac: 0.3,
            initial_div: 25.0,
            final_div: 100.0,
            eval_tiles: 30,
            enrich: true,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.peak_lr) {
            return Err(Error::config(format!("{path}.peak_lr"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{path}.weight_decay"), "must be non-negative"));
        }
        for (name, v) in [("epochs", self.epochs), ("steps_per_epoch", self.steps_per_epoch), ("batch_size", self.batch_size)] {
            if v == 0 {
                return Err(Error::config(format!("{path}.{name}"), "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config(format!("{path}.warmup_frac"), "must lie in [0, 1)"));
        }
        if !(positive(self.initial_div) && self.initial_div > 1.0) {
            return Err(Error::config(format!("{path}.initial_div"), "must exceed 1"));
        }
        if !(positive(self.final_div) && self.final_div > self.initial_div) {
            return Err(Error::config(format!("{path}.final_div"), "must exceed initial_div"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            peak: self.peak_lr,
            total_steps: self.epochs * self.steps_per_epoch,
            warmup_frac: self.warmup_frac,
            initial_div: self.initial_div,
            final_div: self.final_div,
        }
    }
}

/// Linear warmup from `peak / initial_div` to `peak`, then cosine decay to
/// `peak / final_div` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub initial_div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn peak_step(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).floor() as usize).min(self.total_steps.saturating_sub(1))
    }

    pub fn lr(&self, step: usize) -> f64 {
        let start = self.peak / self.initial_div;
        let end = self.peak / self.final_div;
        let top = self.peak_step();
        let last = self.total_steps.saturating_sub(1);
        if step == top {
            return self.peak;
        }
        if step < top {
            return start + (self.peak - start) * step as f64 / top as f64;
        }
        let t = ((step - top) as f64 / (last - top).max(1) as f64).min(1.0);
        end + (self.peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
struct UpLayer {
    up_weight: ParamId,
    up_bias: ParamId,
    conv_weight: ParamId,
    conv_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct SegDecoder {
    layers: Vec<UpLayer>,
    head_weight: ParamId,
    head_bias: ParamId,
    pub n_classes: usize,
    pub bottleneck_channels: usize,
}

fn he_normal(shape: [usize; 4], fan_in: usize, key: SeedKey) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let mut rng = key.rng();
    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
}

impl SegDecoder {
    /// `skip_widths` lists the encoder map widths from the deepest (used by
    /// the first layer) to the shallowest.
    pub fn register(
        store: &mut ParamStore,
        bottleneck_channels: usize,
        skip_widths: &[usize],
        n_classes: usize,
        key: SeedKey,
    ) -> Result<Self> {
        if skip_widths.len() != DECODER_LAYERS {
            return Err(Error::InvalidArgument(format!(
                "decoder needs {DECODER_LAYERS} skip maps, encoder provides {}",
                skip_widths.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!("{n_classes} segmentation classes")));
        }
        let mut layers = Vec::with_capacity(DECODER_LAYERS);
        let mut c = bottleneck_channels;
        for (i, &skip) in skip_widths.iter().enumerate() {
            let half = (c / 2).max(1);
            let name = format!("decoder.up{}", i + 1);
            let k = key.derive(&name);
            let up_weight = store.add(format!("{name}.deconv.weight"), he_normal([c, half, 2, 2], c, k.derive("deconv")), true)?;
            let up_bias = store.add(format!("{name}.deconv.bias"), Tensor::zeros([half]), true)?;
            let fan = (half + skip) * 9;
            let conv_weight = store.add(
                format!("{name}.conv.weight"),
                he_normal([half, half + skip, 3, 3], fan, k.derive("conv")),
                true,
            )?;
            let conv_bias = store.add(format!("{name}.conv.bias"), Tensor::zeros([half]), true)?;
            layers.push(UpLayer {
                up_weight,
                up_bias,
                conv_weight,
                conv_bias,
            });
            c = half;
        }
        let head_weight = store.add(
            "decoder.head.weight",
            he_normal([n_classes, c, 1, 1], c, key.derive("decoder.head")),
            true,
        )?;
        let head_bias = store.add("decoder.head.bias", Tensor::zeros([n_classes]), true)?;
        Ok(SegDecoder {
            layers,
            head_weight,
            head_bias,
            n_classes,
            bottleneck_channels,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Logits `[N, n_classes, H, W]` from a bottleneck and skips ordered
    /// deepest first.
    pub fn forward(&self, g: &mut Graph, p: &Bound, bottleneck: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "decoder got {} skip maps, expected {}",
                skips.len(),
                self.layers.len()
            )));
        }
        let mut h = bottleneck;
        for (layer, &skip) in self.layers.iter().zip(skips) {
            let up = g.conv_transpose2d(h, p.var(layer.up_weight), 2)?;
            let up = g.add_channel_bias(up, p.var(layer.up_bias))?;
            let joined = g.concat(&[up, skip], 1)?;
            let conv = g.conv2d(joined, p.var(layer.conv_weight), 1, 1)?;
            let conv = g.add_channel_bias(conv, p.var(layer.conv_bias))?;
            h = g.relu(conv);
        }
        let logits = g.conv2d(h, p.var(self.head_weight), 1, 0)?;
        g.add_channel_bias(logits, p.var(self.head_bias))
    }
}

/// Frozen encoder outputs for a set of tiles: bottleneck and skip maps
/// (deepest first), each `[N, C, h, w]`.
#[derive(Debug, Clone)]
pub struct EncodedTiles {
    pub bottleneck: Tensor,
    pub skips: Vec<Tensor>,
}

impl EncodedTiles {
    fn select(&self, rows: &[usize]) -> Result<EncodedTiles> {
        Ok(EncodedTiles {
            bottleneck: self.bottleneck.select_rows(rows)?,
            skips: self.skips.iter().map(|s| s.select_rows(rows)).collect::<Result<_>>()?,
        })
    }
}

pub fn encode_tiles(pre: &Pretrained, dataset: &Dataset, indices: &[usize], precision: Precision) -> Result<EncodedTiles> {
    const CHUNK: usize = 32;
    let mut bottlenecks = Vec::new();
    let mut skips: Vec<Vec<Tensor>> = Vec::new();
    for chunk in indices.chunks(CHUNK) {
        let tiles: Vec<_> = chunk.iter().map(|&i| &dataset.samples[i].tile).collect();
        let size = tiles[0].height();
        if size % 32 != 0 || tiles[0].width() != size {
            return Err(Error::InvalidShape {
                op: "encode_tiles",
                shape: vec![tiles[0].height(), tiles[0].width()],
                reason: "segmentation tiles must be square with a side divisible by 32".into(),
            });
        }
        let mut g = Graph::new(precision);
        let p = pre.store.bind_frozen(&mut g);
        let x = g.constant(tiles_to_tensor(tiles)?);
        let mut unused = Vec::new();
        let maps = pre.encoder.forward_features(&mut g, &p, x, Mode::Eval, &mut unused)?;
        if maps.maps.len() != DECODER_LAYERS {
            return Err(Error::config(
                "encoder.stage_widths",
                format!("segmentation needs {} stages", DECODER_LAYERS - 1),
            ));
        }
        let last = *maps.maps.last().expect("nonempty");
        let pooled = g.max_pool2(last)?;
        bottlenecks.push(g.value(pooled).clone());
        let deep_first: Vec<Tensor> = maps.maps.iter().rev().map(|&v| g.value(v).clone()).collect();
        if skips.is_empty() {
            skips = deep_first.into_iter().map(|t| vec![t]).collect();
        } else {
            for (acc, t) in skips.iter_mut().zip(deep_first) {
                acc.push(t);
            }
        }
    }
    if bottlenecks.is_empty() {
        return Err(Error::InvalidArgument("no tiles to encode".into()));
    }
    Ok(EncodedTiles {
        bottleneck: Tensor::concat_rows(&bottlenecks)?,
        skips: skips.iter().map(|parts| Tensor::concat_rows(parts)).collect::<Result<_>>()?,
    })
}

fn mask_labels(masks: &[&MaskTile]) -> Vec<u32> {
    masks.iter().flat_map(|m| m.data().iter().map(|&v| v as u32)).collect()
}

/// Bottleneck with the generator's perturbation added at every position.
fn enriched_bottleneck(g: &mut Graph, gen: &Generator, p: &Bound, bottleneck: Var, z: Tensor) -> Result<Var> {
    let pooled = g.global_avg_pool(bottleneck)?;
    let pooled_value = g.value(pooled).clone();
    let (n, c) = (pooled_value.shape()[0], pooled_value.shape()[1]);
    let mut norms = Vec::with_capacity(n * c);
    for i in 0..n {
        let norm = pooled_value.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.extend(std::iter::repeat(norm).take(c));
    }
    let norms = g.constant(Tensor::new([n, c], norms)?);
    let unit = g.l2_normalize(pooled)?;
    let z = g.constant(z);
    let q_prime = gen.generate(g, p, unit, z)?;
    let delta = g.sub(q_prime, unit)?;
    let delta = g.mul(delta, norms)?;
    g.add_broadcast_channels(bottleneck, delta)
}

#[derive(Debug, Clone)]
pub struct TrainedSegmenter {
    pub store: ParamStore,
    pub decoder: SegDecoder,
    pub losses: Vec<f64>,
    pub precision: Precision,
}

impl TrainedSegmenter {
    pub fn predict(&self, encoded: &EncodedTiles) -> Result<Vec<Vec<u8>>> {
        let n = encoded.bottleneck.shape()[0];
        let mut out = Vec::with_capacity(n);
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(16) {
            let part = encoded.select(chunk)?;
            let mut g = Graph::new(self.precision);
            let p = self.store.bind_frozen(&mut g);
            let b = g.constant(part.bottleneck);
            let skips: Vec<Var> = part.skips.into_iter().map(|s| g.constant(s)).collect();
            let logits = self.decoder.forward(&mut g, &p, b, &skips)?;
            out.extend(argmax_channels(g.value(logits))?);
        }
        Ok(out)
    }
}

/// Trains a decoder (and the generator, when enriching) on encoded tiles
/// with per-pixel cross-entropy under a one-cycle AdamW schedule.
pub fn train_decoder(
    encoded: &EncodedTiles,
    masks: &[&MaskTile],
    n_classes: usize,
    generator: Option<(&Generator, &ParamStore)>,
    noise: &crate::genco::NoiseSpec,
    cfg: &SegmenterConfig,
    key: SeedKey,
    precision: Precision,
) -> Result<TrainedSegmenter> {
    cfg.validate("fewshot.segmenter")?;
    let n = encoded.bottleneck.shape()[0];
    if masks.len() != n {
        return Err(Error::ShapeMismatch {
            op: "train_decoder masks",
            lhs: vec![n],
            rhs: vec![masks.len()],
        });
    }
    let full = encoded.skips.last().expect("five skips").shape();
    for m in masks {
        if m.height() != full[2] || m.width() != full[3] {
            return Err(Error::ShapeMismatch {
                op: "train_decoder mask size",
                lhs: vec![full[2], full[3]],
                rhs: vec![m.height(), m.width()],
            });
        }
        m.validate(n_classes)?;
    }
    let bottleneck_channels = encoded.bottleneck.shape()[1];
    let skip_widths: Vec<usize> = encoded.skips.iter().map(|s| s.shape()[1]).collect();
    let mut store = ParamStore::new();
    let decoder = SegDecoder::register(&mut store, bottleneck_channels, &skip_widths, n_classes, key.derive("init"))?;
    let gen = match (cfg.enrich, generator) {
        (false, _) => None,
        (true, None) => return Err(Error::InvalidArgument("enrichment requires a generator".into())),
        (true, Some((gen, params))) => {
            if gen.feature_dim != bottleneck_channels {
                return Err(Error::ShapeMismatch {
                    op: "bottleneck enrichment",
                    lhs: vec![bottleneck_channels],
                    rhs: vec![gen.feature_dim],
                });
            }
            copy_generator(params, &mut store)?;
            Some(Generator::attach(&store, gen.feature_dim, gen.noise_dim)?)
        }
    };
    store.round_to(precision);
    let mut opt = Optimizer::new(OptimizerKind::adamw(), cfg.peak_lr, cfg.weight_decay, store.trainable_ids());
    let schedule = cfg.schedule();
    let labels_all: Vec<Vec<u32>> = masks.iter().map(|m| mask_labels(&[m])).collect();

    let mut losses = Vec::with_capacity(schedule.total_steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..schedule.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size.min(n));
        while batch.len() < cfg.batch_size.min(n) {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut key.derive("order").index(step as u64).rng());
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let part = encoded.select(&batch)?;
        let mut labels: Vec<u32> = batch.iter().flat_map(|&i| labels_all[i].iter().copied()).collect();

        let mut g = Graph::new(precision);
        let p = store.bind(&mut g, |_| true);
        let b = g.constant(part.bottleneck);
        let mut skips: Vec<Var> = part.skips.into_iter().map(|s| g.constant(s)).collect();
        let b = match &gen {
            Some(gen) => {
                let z = sample_noise(noise, batch.len(), key.derive("noise").index(step as u64));
                let perturbed = enriched_bottleneck(&mut g, gen, &p, b, z)?;
                for s in skips.iter_mut() {
                    *s = g.concat(&[*s, *s], 0)?;
                }
                labels.extend_from_within(..);
                g.concat(&[b, perturbed], 0)?
            }
            None => b,
        };
        let logits = decoder.forward(&mut g, &p, b, &skips)?;
        let loss = g.softmax_cross_entropy(logits, &labels, IGNORE as u32)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("segmentation loss at step {step}")));
        }
        losses.push(value);
        let mut grads = g.backward(loss)?;
        let pg = p.gradients(&mut grads, opt.params());
        opt.set_lr(schedule.lr(step));
        opt.step(&mut store, &pg, precision)?;
    }
    Ok(TrainedSegmenter {
        store,
        decoder,
        losses,
        precision,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationTrial {
    pub train_miou: f64,
    pub eval_miou: f64,
    pub eval_per_class: Vec<Option<f64>>,
    pub train_tiles: usize,
}

fn score(model: &TrainedSegmenter, encoded: &EncodedTiles, masks: &[&MaskTile], n_classes: usize) -> Result<MiouReport> {
    let preds = model.predict(encoded)?;
    let pred_refs: Vec<&[u8]> = preds.iter().map(|p| p.as_slice()).collect();
    let gt_refs: Vec<&[u8]> = masks.iter().map(|m| m.data()).collect();
    miou(&pred_refs, &gt_refs, n_classes, IGNORE)
}

/// Fine-tunes a decoder on the split's training tiles and scores it on both
/// the training and held-out tiles.
pub fn finetune_segmenter(
    pre: &Pretrained,
    dataset: &Dataset,
    split: &SegmentationSplit,
    cfg: &SegmenterConfig,
    key: SeedKey,
    precision: Precision,
) -> Result<SegmentationTrial> {
    let before = backbone_fingerprint(&pre.store);
    let n_classes = dataset.n_classes();
    let masks = |idx: &[usize]| -> Result<Vec<&MaskTile>> {
        idx.iter()
            .map(|&i| {
                dataset.samples[i].mask.as_ref().ok_or_else(|| Error::InvalidArgument(format!("tile {i} has no mask")))
            })
            .collect()
    };
    let train_masks = masks(&split.train)?;
    let eval_masks = masks(&split.eval)?;
    let train = encode_tiles(pre, dataset, &split.train, precision)?;
    let generator = match (&pre.generator, cfg.enrich) {
        (Some(gen), true) => Some((gen, &pre.store)),
        (None, true) => {
            return Err(Error::InvalidArgument(
                "enrichment requested but the checkpoint has no generator".into(),
            ))
        }
        _ => None,
    };
    let model = train_decoder(&train, &train_masks, n_classes, generator, &pre.genco.noise, cfg, key, precision)?;
    if backbone_fingerprint(&pre.store) != before {
        return Err(Error::InvalidArgument("backbone parameters changed during fine-tuning".into()));
    }
    let train_report = score(&model, &train, &train_masks, n_classes)?;
    let eval_report = if split.eval.is_empty() {
        train_report.clone()
    } else {
        let eval = encode_tiles(pre, dataset, &split.eval, precision)?;
        score(&model, &eval, &eval_masks, n_classes)?
    };
    Ok(SegmentationTrial {
        train_miou: train_report.mean,
        eval_miou: eval_report.mean,
        eval_per_class: eval_report.per_class,
        train_tiles: split.train.len(),
    })
}
