//! Stage-1 contrastive pretraining.
//!
//! Each step augments every tile twice. The query view goes through the
//! online encoder and the key view through the offline (momentum) encoder.
//! The objective is evaluated against the memory bank with fresh generator
//! noise, and SGD updates every online parameter, generator included. The
//! offline encoder then tracks the online one by exponential moving average
//! before the keys are enqueued.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{augment_pair, tiles_to_tensor, AugmentConfig, Dataset, ImageTile};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::genco::{
    genco_loss, moco_loss, momentum_update, offline_copy, sample_noise, GencoConfig, Generator, MemoryBank,
};
use crate::nn::{apply_bn_updates, Mode};
use crate::numcore::{Checkpoint, Graph, Optimizer, OptimizerKind, ParamStore, Precision, SeedKey, Tensor};

pub const METRICS_FILE: &str = "pretrain_metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CHECKPOINT_KIND: &str = "genco-pretrain";

/// Prefixes of the parameters mirrored by the offline encoder.
const OFFLINE_PREFIXES: [&str; 2] = ["encoder.", "projector."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    /// `(epoch, lr)` pairs, strictly increasing in epoch.
    pub lr_milestones: Vec<(usize, f64)>,
    /// Train with the plain momentum-contrast loss and no generator.
    pub no_generator: bool,
    /// Batch-norm statistics are computed over this many sub-batches. Key
    /// sub-batches are drawn from a shuffled order so a query and its key
    /// never see the same batch statistics.
    pub bn_groups: usize,
    /// Save an intermediate checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    pub precision: Precision,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.03,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            lr_milestones: vec![(21, 0.003), (24, 0.0003)],
            no_generator: false,
            bn_groups: 4,
            checkpoint_every: 10,
            augment: AugmentConfig {
                crop_scale_range: (0.5, 1.0),
                rotation_choices: vec![0],
                ..AugmentConfig::default()
            },
            precision: Precision::F32,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config(format!("{path}.epochs"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be positive"));
        }
        if self.bn_groups == 0 || self.batch_size % self.bn_groups != 0 || self.batch_size / self.bn_groups < 2 {
            return Err(Error::config(
                format!("{path}.bn_groups"),
                "must divide batch_size into groups of at least 2",
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("{path}.base_lr"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{path}.weight_decay"), "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::config(format!("{path}.sgd_momentum"), "must lie in [0, 1)"));
        }
        for (i, &(epoch, lr)) in self.lr_milestones.iter().enumerate() {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{path}.lr_milestones[{i}]"), "lr must be positive"));
            }
            if i > 0 && epoch <= self.lr_milestones[i - 1].0 {
                return Err(Error::config(
                    format!("{path}.lr_milestones[{i}]"),
                    "epochs must be strictly increasing",
                ));
            }
        }
        self.augment.validate(&format!("{path}.augment"))
    }
}

/// Step-function learning rate: the lr of the latest milestone at or before
/// `epoch`, or the base rate before the first milestone.
pub fn lr_at_epoch(cfg: &PretrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    Ok(cfg
        .lr_milestones
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .map_or(cfg.base_lr, |(_, lr)| *lr))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder_config: EncoderConfig,
    pub genco: GencoConfig,
    pub config: PretrainConfig,
    pub seed: u64,
    pub online: ParamStore,
    pub offline: ParamStore,
    pub bank: MemoryBank,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
    /// Steps on which the offline branch was verified to carry no gradient.
    pub offline_grad_checks: u64,
    encoder: EncoderModel,
    offline_encoder: EncoderModel,
    generator: Option<Generator>,
    optimizer: Optimizer,
}

fn validate_all(enc: &EncoderConfig, genco: &GencoConfig, cfg: &PretrainConfig) -> Result<()> {
    enc.validate("encoder")?;
    genco.validate("genco")?;
    cfg.validate("pretrain")?;
    if cfg.batch_size > genco.bank_capacity {
        return Err(Error::config(
            "pretrain.batch_size",
            format!("exceeds genco.bank_capacity {}", genco.bank_capacity),
        ));
    }
    Ok(())
}

impl TrainState {
    pub fn new(encoder_config: &EncoderConfig, genco: &GencoConfig, config: &PretrainConfig, seed: u64) -> Result<Self> {
        validate_all(encoder_config, genco, config)?;
        let init = SeedKey::root(seed).derive("init");
        let mut online = ParamStore::new();
        let encoder = EncoderModel::register(encoder_config, &mut online, init.derive("encoder"))?;
        let generator = if config.no_generator {
            None
        } else {
            Some(Generator::register(
                &mut online,
                encoder_config.projection_dim,
                genco.noise.dim,
                init.derive("generator"),
            )?)
        };
        online.round_to(config.precision);
        let offline = offline_copy(&online, &OFFLINE_PREFIXES)?;
        let offline_encoder = EncoderModel::attach(encoder_config, &offline)?;
        let optimizer = Optimizer::new(
            OptimizerKind::sgd(config.sgd_momentum),
            config.base_lr,
            config.weight_decay,
            online.trainable_ids(),
        );
        Ok(TrainState {
            encoder_config: encoder_config.clone(),
            genco: genco.clone(),
            config: config.clone(),
            seed,
            bank: MemoryBank::new(genco.bank_capacity, encoder_config.projection_dim)?,
            online,
            offline,
            epoch: 0,
            step: 0,
            offline_grad_checks: 0,
            encoder,
            offline_encoder,
            generator,
            optimizer,
        })
    }

    pub fn encoder(&self) -> &EncoderModel {
        &self.encoder
    }

    pub fn generator(&self) -> Option<&Generator> {
        self.generator.as_ref()
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    fn meta(&self, provenance: &serde_json::Value) -> serde_json::Value {
        json!({
            "kind": CHECKPOINT_KIND,
            "seed": self.seed,
            "encoder": self.encoder_config,
            "genco": self.genco,
            "pretrain": self.config,
            "epoch": self.epoch,
            "step": self.step,
            "provenance": provenance,
        })
    }

    pub fn to_checkpoint(&self, provenance: &serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(self.meta(provenance));
        ck.extend(self.online.to_named("online."));
        ck.extend(self.offline.to_named("offline."));
        ck.insert("bank.storage", self.bank.storage_tensor());
        ck.insert(
            "bank.pointer",
            Tensor::new([2], vec![self.bank.write_pointer() as f64, self.bank.fill_count() as f64]).expect("2"),
        );
        let (steps, moments) = self.optimizer.state_tensors(&self.online);
        ck.extend(moments.into_iter().map(|(k, v)| (format!("optim.{k}"), v)));
        ck.insert(
            "counters",
            Tensor::new([3], vec![self.epoch as f64, self.step as f64, steps as f64]).expect("3"),
        );
        ck
    }

    pub fn save(&self, dir: &Path, provenance: &serde_json::Value) -> Result<()> {
        self.to_checkpoint(provenance).save(dir, self.config.precision)
    }

    /// Rebuilds a state from a checkpoint written by [`Self::save`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::StructureMismatch {
                path: "meta.kind".into(),
                reason: "not a pretraining checkpoint".into(),
            });
        }
        let field = |name: &str| -> Result<serde_json::Value> {
            meta.get(name).cloned().ok_or_else(|| Error::StructureMismatch {
                path: format!("meta.{name}"),
                reason: "missing".into(),
            })
        };
        let parse_err = |name: &str, e: serde_json::Error| Error::json(format!("checkpoint meta.{name}"), e);
        let enc: EncoderConfig = serde_json::from_value(field("encoder")?).map_err(|e| parse_err("encoder", e))?;
        let genco: GencoConfig = serde_json::from_value(field("genco")?).map_err(|e| parse_err("genco", e))?;
        let cfg: PretrainConfig = serde_json::from_value(field("pretrain")?).map_err(|e| parse_err("pretrain", e))?;
        let seed = field("seed")?.as_u64().ok_or_else(|| Error::StructureMismatch {
            path: "meta.seed".into(),
            reason: "not an unsigned integer".into(),
        })?;
        let mut state = TrainState::new(&enc, &genco, &cfg, seed)?;
        state.online.load_named("online.", &ck.tensors)?;
        state.offline.load_named("offline.", &ck.tensors)?;
        let missing = |name: &str| Error::StructureMismatch {
            path: name.into(),
            reason: "missing from checkpoint".into(),
        };
        let storage = ck.get("bank.storage").ok_or_else(|| missing("bank.storage"))?;
        let ptr = ck.get("bank.pointer").ok_or_else(|| missing("bank.pointer"))?.data();
        let restored = MemoryBank::restore(storage, ptr[0] as usize, ptr[1] as usize)?;
        if restored.capacity() != genco.bank_capacity || restored.dim() != enc.projection_dim {
            return Err(Error::StructureMismatch {
                path: "bank.storage".into(),
                reason: format!("shape {:?} disagrees with configuration", storage.shape()),
            });
        }
        state.bank = restored;
        let counters = ck.get("counters").ok_or_else(|| missing("counters"))?.data();
        state.epoch = counters[0] as usize;
        state.step = counters[1] as u64;
        let moments = ck.with_prefix("optim.");
        let online = state.online.clone();
        state.optimizer.load_state(&online, counters[2] as u64, &moments)?;
        Ok(state)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

/// Augments `(sample index, tile)` pairs into query/key views. Each view is
/// keyed by `(augment, epoch, sample index)` so the result does not depend on
/// `threads`.
pub fn augment_batch(
    batch: &[(usize, &ImageTile)],
    cfg: &AugmentConfig,
    key: SeedKey,
    threads: usize,
) -> Result<Vec<(ImageTile, ImageTile)>> {
    let work = |items: &[(usize, &ImageTile)]| -> Result<Vec<(ImageTile, ImageTile)>> {
        items
            .iter()
            .map(|&(i, t)| augment_pair(t, cfg, key.index(i as u64)))
            .collect()
    };
    let threads = threads.max(1);
    if threads == 1 || batch.len() < 2 {
        return work(batch);
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch.chunks(chunk).map(|c| s.spawn(move || work(c))).collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("augmentation worker panicked")?);
        }
        Ok(out)
    })
}

/// Runs one optimization step on `batch` and returns the loss.
pub fn pretrain_step(state: &mut TrainState, batch: &[(usize, &ImageTile)], threads: usize) -> Result<f64> {
    let cfg = &state.config;
    let precision = cfg.precision;
    let root = SeedKey::root(state.seed);
    let lr = lr_at_epoch(cfg, state.epoch)?;
    let views = augment_batch(batch, &cfg.augment, root.derive("augment").index(state.epoch as u64), threads)?;
    let b = batch.len();
    let groups = cfg.bn_groups;
    if b % groups != 0 || b / groups < 2 {
        return Err(Error::InvalidArgument(format!("batch of {b} cannot form {groups} normalization groups")));
    }
    let per = b / groups;
    let mut key_order: Vec<usize> = (0..b).collect();
    key_order.shuffle(&mut root.derive("bn-shuffle").index(state.step).rng());

    let mut g = Graph::new(precision);
    let online = state.online.bind(&mut g, |_| true);
    let mut online_bn = Vec::new();
    let mut q_parts = Vec::with_capacity(groups);
    for chunk in views.chunks(per) {
        let x = g.constant(tiles_to_tensor(chunk.iter().map(|v| &v.0))?);
        q_parts.push(state.encoder.forward_projection(&mut g, &online, x, Mode::Train, &mut online_bn)?);
    }
    let q = g.concat(&q_parts, 0)?;

    let offline = state.offline.bind_frozen(&mut g);
    let mut offline_bn = Vec::new();
    let dim = state.encoder_config.projection_dim;
    let mut keys = vec![0.0; b * dim];
    for chunk in key_order.chunks(per) {
        let x = g.constant(tiles_to_tensor(chunk.iter().map(|&i| &views[i].1))?);
        let kv = state
            .offline_encoder
            .forward_projection(&mut g, &offline, x, Mode::Train, &mut offline_bn)?;
        for (r, &i) in chunk.iter().enumerate() {
            keys[i * dim..(i + 1) * dim].copy_from_slice(g.value(kv).row(r));
        }
    }
    let k = g.constant(Tensor::new([b, dim], keys)?);

    let loss = match &state.generator {
        Some(gen) => {
            let z = sample_noise(&state.genco.noise, b, root.derive("noise").index(state.step));
            let z = g.constant(z);
            let q_prime = gen.generate(&mut g, &online, q, z)?;
            genco_loss(&mut g, q, q_prime, k, &state.bank, state.genco.loss_options())?
        }
        None => moco_loss(&mut g, q, k, &state.bank, state.genco.tau)?,
    };
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("pretraining loss at step {}", state.step)));
    }
    let mut grads = g.backward(loss)?;
    for (id, p) in state.offline.iter() {
        if grads.get(offline.var(id)).is_some() {
            return Err(Error::InvalidArgument(format!(
                "momentum branch received a gradient for `{}`",
                p.name
            )));
        }
    }
    state.offline_grad_checks += 1;
    let keys = g.value(k).clone();
    let param_grads = online.gradients(&mut grads, state.optimizer.params());
    drop(g);

    state.optimizer.set_lr(lr);
    state.optimizer.step(&mut state.online, &param_grads, precision)?;
    apply_bn_updates(&mut state.online, &online_bn, precision);
    apply_bn_updates(&mut state.offline, &offline_bn, precision);
    momentum_update(&state.online, &mut state.offline, state.genco.momentum, precision)?;
    state.bank.enqueue(&keys)?;
    state.step += 1;
    Ok(loss_value)
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedKey::root(seed).derive("shuffle").index(epoch as u64).rng());
    order
}

/// Runs one full epoch, dropping the final partial batch.
pub fn pretrain_epoch(state: &mut TrainState, dataset: &Dataset, threads: usize) -> Result<Vec<StepRecord>> {
    let order = epoch_order(state.seed, state.epoch, dataset.len());
    let lr = lr_at_epoch(&state.config, state.epoch)?;
    let mut records = Vec::new();
    for chunk in order.chunks_exact(state.config.batch_size) {
        let batch: Vec<(usize, &ImageTile)> = chunk.iter().map(|&i| (i, &dataset.samples[i].tile)).collect();
        let step = state.step;
        let loss = pretrain_step(state, &batch, threads)?;
        records.push(StepRecord {
            epoch: state.epoch,
            step,
            loss,
            lr,
        });
    }
    state.epoch += 1;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub threads: usize,
    /// Stored in every checkpoint's metadata.
    pub provenance: serde_json::Value,
    /// Stop once this many epochs are complete (for staged runs).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Every step record of the run so far, including earlier sessions.
    pub records: Vec<StepRecord>,
}

impl PretrainReport {
    /// Mean loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.loss;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

fn read_records(path: &Path, before_epoch: usize) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let r: StepRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset,
                reason: e.to_string(),
            })?;
            if r.epoch < before_epoch {
                out.push(r);
            }
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

fn write_records(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json("metrics record", e))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains `state` to the end of its schedule (or `stop_after`), writing
/// periodic checkpoints, a final checkpoint and the metrics log under
/// `opts.out_dir`. A state restored from a checkpoint continues seamlessly;
/// log lines from epochs it has not completed are discarded.
pub fn pretrain_run(state: &mut TrainState, dataset: &Dataset, opts: &RunOptions) -> Result<PretrainReport> {
    if dataset.len() < state.config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} tiles is smaller than one batch of {}",
            dataset.len(),
            state.config.batch_size
        )));
    }
    if let Some(c) = dataset.channels() {
        if c != state.encoder_config.in_channels {
            return Err(Error::config(
                "encoder.in_channels",
                format!("dataset tiles have {c} channels"),
            ));
        }
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(format!("creating {}", opts.out_dir.display()), e))?;
    let metrics = opts.out_dir.join(METRICS_FILE);
    let mut records = read_records(&metrics, state.epoch)?;
    let end = opts.stop_after.unwrap_or(state.config.epochs).min(state.config.epochs);
    while state.epoch < end {
        records.extend(pretrain_epoch(state, dataset, opts.threads)?);
        let every = state.config.checkpoint_every;
        if every > 0 && state.epoch % every == 0 && state.epoch < state.config.epochs {
            let dir = opts.out_dir.join(CHECKPOINT_DIR).join(format!("epoch-{:04}", state.epoch));
            state.save(&dir, &opts.provenance)?;
            write_records(&metrics, &records)?;
        }
    }
    let checkpoint = opts.out_dir.join(FINAL_CHECKPOINT);
    state.save(&checkpoint, &opts.provenance)?;
    write_records(&metrics, &records)?;
    Ok(PretrainReport {
        checkpoint,
        metrics,
        records,
    })
}

/// Online encoder and generator read back from a pretraining checkpoint.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder_config: EncoderConfig,
    pub genco: GencoConfig,
    pub seed: u64,
    /// Online parameters (`encoder.*`, `projector.*`, `generator.*`).
    pub store: ParamStore,
    pub encoder: EncoderModel,
    pub generator: Option<Generator>,
    pub meta: serde_json::Value,
}

impl Pretrained {
    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let state = TrainState::from_checkpoint(&ck)?;
        Ok(Pretrained::from_state(&state, ck.meta))
    }

    pub fn from_state(state: &TrainState, meta: serde_json::Value) -> Self {
        Pretrained {
            encoder_config: state.encoder_config.clone(),
            genco: state.genco.clone(),
            seed: state.seed,
            store: state.online.clone(),
            encoder: state.encoder.clone(),
            generator: state.generator.clone(),
            meta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(base: f64, milestones: Vec<(usize, f64)>, epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            base_lr: base,
            lr_milestones: milestones,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn milestone_schedule_by_hand() {
        let c = cfg(1.0, vec![(2, 0.1)], 4);
        let lrs: Vec<f64> = (0..4).map(|e| lr_at_epoch(&c, e).unwrap()).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.1, 0.1]);
        assert!(lr_at_epoch(&c, 4).is_err());
    }

    #[test]
    fn empty_milestones_hold_base_rate() {
        let c = cfg(0.5, vec![], 10);
        assert!((0..10).all(|e| lr_at_epoch(&c, e).unwrap() == 0.5));
    }

    #[test]
    fn milestones_must_increase() {
        let c = cfg(0.5, vec![(3, 0.1), (3, 0.01)], 10);
        match c.validate("pretrain") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "pretrain.lr_milestones[1]"),
            other => panic!("{other:?}"),
        }
        assert!(cfg(0.5, vec![(3, 0.0)], 10).validate("pretrain").is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 50);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 50));
        assert_ne!(a, epoch_order(1, 1, 50));
    }
}
