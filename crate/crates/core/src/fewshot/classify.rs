use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::metrics::{accuracy, argmax_rows};
use crate::dataio::{tiles_to_tensor, Dataset, ImageTile, IGNORE};
use crate::error::{Error, Result};
use crate::genco::{sample_noise, Generator, NoiseSpec, GENERATOR_PREFIX};
use crate::nn::{Linear, Mode};
use crate::numcore::{Graph, Optimizer, OptimizerKind, ParamStore, Precision, SeedKey, Tensor};
use crate::pretrain::Pretrained;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Double the support set with generated features.
    pub enrich: bool,
    /// Generate the extra rows once instead of with fresh noise each step.
    pub freeze_enriched_set: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 0.001,
            epochs: 100,
            batch_size: 64,
            weight_decay: 0.0,
            enrich: true,
            freeze_enriched_set: false,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{path}.lr"), "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{path}.epochs"), "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("{path}.batch_size"), "must be at least 2"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{path}.weight_decay"), "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSource {
    Real,
    Generated,
}

/// Real rows followed by one generated row per real row.
#[derive(Debug, Clone)]
pub struct EnrichedSet {
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub provenance: Vec<RowSource>,
}

fn check_features(features: &Tensor, labels: &[u32], gen: &Generator) -> Result<()> {
    let s = features.shape();
    if s.len() != 2 || s[1] != gen.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "enrich",
            lhs: s.to_vec(),
            rhs: vec![s.first().copied().unwrap_or(0), gen.feature_dim],
        });
    }
    if labels.len() != s[0] {
        return Err(Error::ShapeMismatch {
            op: "enrich labels",
            lhs: vec![s[0]],
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// Adds `q′ = G(q, z)` for every row `q` of `features`, with the label of
/// its source row.
pub fn enrich(
    features: &Tensor,
    labels: &[u32],
    gen: &Generator,
    params: &ParamStore,
    noise: &NoiseSpec,
    key: SeedKey,
    precision: Precision,
) -> Result<EnrichedSet> {
    check_features(features, labels, gen)?;
    let m = labels.len();
    let mut g = Graph::new(precision);
    let p = params.bind_frozen(&mut g);
    let q = g.constant(features.clone());
    let z = g.constant(sample_noise(noise, m, key));
    let q_prime = gen.generate(&mut g, &p, q, z)?;
    let q_prime = g.value(q_prime).clone();
    let features = Tensor::concat_rows(&[features.clone(), q_prime])?;
    let mut all = labels.to_vec();
    all.extend_from_slice(labels);
    let mut provenance = vec![RowSource::Real; m];
    provenance.extend(std::iter::repeat(RowSource::Generated).take(m));
    Ok(EnrichedSet {
        features,
        labels: all,
        provenance,
    })
}

/// Copies `generator.*` parameters into `dst`.
pub(crate) fn copy_generator(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    for (_, p) in src.iter() {
        if p.name.starts_with(GENERATOR_PREFIX) {
            dst.add(p.name.clone(), p.value.clone(), p.trainable)?;
        }
    }
    Ok(())
}

/// Fingerprint of the frozen backbone (everything except the generator).
pub fn backbone_fingerprint(store: &ParamStore) -> String {
    let mut backbone = ParamStore::new();
    for (_, p) in store.iter() {
        if !p.name.starts_with(GENERATOR_PREFIX) {
            backbone.add(p.name.clone(), p.value.clone(), p.trainable).expect("unique names");
        }
    }
    backbone.fingerprint()
}

/// A single linear layer on frozen features, trained jointly with a copy of
/// the generator.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub store: ParamStore,
    pub head: Linear,
    pub generator: Option<Generator>,
    /// Rows seen per epoch (`M`, or `2M` with enrichment).
    pub train_rows: usize,
    pub losses: Vec<f64>,
    pub precision: Precision,
}

impl LinearProbe {
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(self.precision);
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(features.clone());
        let y = self.head.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<u32>> {
        argmax_rows(&self.logits(features)?)
    }
}

/// Trains a linear head with softmax cross-entropy on `features`. With
/// enrichment every mini-batch pairs each real row with a generated row.
pub fn train_linear_probe(
    features: &Tensor,
    labels: &[u32],
    n_way: usize,
    generator: Option<(&Generator, &ParamStore)>,
    noise: &NoiseSpec,
    cfg: &ClassifierConfig,
    key: SeedKey,
    precision: Precision,
) -> Result<LinearProbe> {
    cfg.validate("fewshot.classifier")?;
    let s = features.shape();
    if s.len() != 2 || s[0] == 0 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "train_linear_probe",
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_way) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {n_way}-way episode")));
    }
    let (m, d) = (s[0], s[1]);
    let mut store = ParamStore::new();
    let head = Linear::register(&mut store, "head", d, n_way, key.derive("init"))?;
    let gen = match (cfg.enrich, generator) {
        (false, _) => None,
        (true, None) => return Err(Error::InvalidArgument("enrichment requires a generator".into())),
        (true, Some((gen, params))) => {
            check_features(features, labels, gen)?;
            copy_generator(params, &mut store)?;
            Some(Generator::attach(&store, gen.feature_dim, gen.noise_dim)?)
        }
    };
    store.round_to(precision);
    let frozen_set = match (&gen, cfg.freeze_enriched_set) {
        (Some(gen), true) => Some(enrich(features, labels, gen, &store, noise, key.derive("enrich"), precision)?),
        _ => None,
    };
    let trainable: Vec<_> = store
        .trainable_ids()
        .into_iter()
        .filter(|&id| frozen_set.is_none() || !store.get(id).name.starts_with(GENERATOR_PREFIX))
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr, cfg.weight_decay, trainable);
    let real_per_batch = if gen.is_some() { (cfg.batch_size / 2).max(1) } else { cfg.batch_size };

    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut key.derive("shuffle").index(epoch as u64).rng());
        for chunk in order.chunks(real_per_batch) {
            let mut g = Graph::new(precision);
            let p = store.bind(&mut g, |_| true);
            let x = g.constant(features.select_rows(chunk)?);
            let mut batch_labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let x = match (&gen, &frozen_set) {
                (Some(_), Some(set)) => {
                    let idx: Vec<usize> = chunk.iter().map(|&i| m + i).collect();
                    let extra = g.constant(set.features.select_rows(&idx)?);
                    batch_labels.extend_from_within(..);
                    g.concat(&[x, extra], 0)?
                }
                (Some(gen), None) => {
                    let z = g.constant(sample_noise(noise, chunk.len(), key.derive("noise").index(step)));
                    let q_prime = gen.generate(&mut g, &p, x, z)?;
                    batch_labels.extend_from_within(..);
                    g.concat(&[x, q_prime], 0)?
                }
                (None, _) => x,
            };
            let logits = head.forward(&mut g, &p, x)?;
            let loss = g.softmax_cross_entropy(logits, &batch_labels, IGNORE as u32)?;
            losses.push(g.value(loss).item());
            let mut grads = g.backward(loss)?;
            let pg = p.gradients(&mut grads, opt.params());
            opt.step(&mut store, &pg, precision)?;
            step += 1;
        }
    }
    Ok(LinearProbe {
        store,
        head,
        generator: gen,
        train_rows: if cfg.enrich { 2 * m } else { m },
        losses,
        precision,
    })
}

/// L2-normalized projections of `tiles` from the frozen encoder in
/// evaluation mode.
pub fn extract_features(pre: &Pretrained, tiles: &[&ImageTile], precision: Precision) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let mut parts = Vec::new();
    for chunk in tiles.chunks(CHUNK) {
        let mut g = Graph::new(precision);
        let p = pre.store.bind_frozen(&mut g);
        let x = g.constant(tiles_to_tensor(chunk.iter().copied())?);
        let mut unused = Vec::new();
        let y = pre.encoder.forward_projection(&mut g, &p, x, Mode::Eval, &mut unused)?;
        parts.push(g.value(y).clone());
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("no tiles to embed".into()));
    }
    Tensor::concat_rows(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTrial {
    pub accuracy: f64,
    pub support_accuracy: f64,
    pub train_rows: usize,
}

/// Fine-tunes a linear head (and the generator, when enriching) on the
/// episode's support set and scores it on the query set.
pub fn finetune_classifier(
    pre: &Pretrained,
    dataset: &Dataset,
    episode: &Episode,
    cfg: &ClassifierConfig,
    key: SeedKey,
    precision: Precision,
) -> Result<ClassificationTrial> {
    let before = backbone_fingerprint(&pre.store);
    let tiles = |set: &[(usize, u32)]| set.iter().map(|&(i, _)| &dataset.samples[i].tile).collect::<Vec<_>>();
    let support = extract_features(pre, &tiles(&episode.support), precision)?;
    let query = extract_features(pre, &tiles(&episode.query), precision)?;
    let generator = match (&pre.generator, cfg.enrich) {
        (Some(gen), true) => Some((gen, &pre.store)),
        (None, true) => {
            return Err(Error::InvalidArgument(
                "enrichment requested but the checkpoint has no generator".into(),
            ))
        }
        _ => None,
    };
    let probe = train_linear_probe(
        &support,
        &episode.support_labels(),
        episode.n_way,
        generator,
        &pre.genco.noise,
        cfg,
        key,
        precision,
    )?;
    if backbone_fingerprint(&pre.store) != before {
        return Err(Error::InvalidArgument("backbone parameters changed during fine-tuning".into()));
    }
    Ok(ClassificationTrial {
        accuracy: accuracy(&probe.predict(&query)?, &episode.query_labels())?,
        support_accuracy: accuracy(&probe.predict(&support)?, &episode.support_labels())?,
        train_rows: probe.train_rows,
    })
}
