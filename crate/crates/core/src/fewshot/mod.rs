//! Few-shot fine-tuning on top of a frozen pretrained encoder.

pub mod classify;
pub mod episode;
pub mod metrics;
pub mod segment;

use serde::{Deserialize, Serialize};

pub use classify::{
    backbone_fingerprint, enrich, extract_features, finetune_classifier, train_linear_probe, ClassificationTrial,
    ClassifierConfig, EnrichedSet, LinearProbe, RowSource,
};
pub use episode::{sample_episode, sample_segmentation_split, Episode, SegmentationSplit};
pub use metrics::{accuracy, aggregate_trials, argmax_channels, argmax_rows, miou, miou_default, MiouReport};
pub use segment::{
    encode_tiles, finetune_segmenter, train_decoder, EncodedTiles, OneCycle, SegDecoder, SegmentationTrial,
    SegmenterConfig, TrainedSegmenter,
};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{Precision, SeedKey};
use crate::pretrain::Pretrained;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub trials: usize,
    pub precision: Precision,
    /// Shot counts compared by the ablation.
    pub ablation_shots: Vec<usize>,
    pub classifier: ClassifierConfig,
    pub segmenter: SegmenterConfig,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig {
            n_way: 3,
            k_shot: 10,
            query_per_class: 15,
            trials: 3,
            precision: Precision::F32,
            ablation_shots: vec![10, 5, 1],
            classifier: ClassifierConfig::default(),
            segmenter: SegmenterConfig::default(),
        }
    }
}

impl FewshotConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("query_per_class", self.query_per_class),
            ("trials", self.trials),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{path}.{name}"), "must be positive"));
            }
        }
        if self.n_way < 2 {
            return Err(Error::config(format!("{path}.n_way"), "must be at least 2"));
        }
        if self.ablation_shots.is_empty() || self.ablation_shots.contains(&0) {
            return Err(Error::config(format!("{path}.ablation_shots"), "must be nonempty and positive"));
        }
        self.classifier.validate(&format!("{path}.classifier"))?;
        self.segmenter.validate(&format!("{path}.segmenter"))
    }

    /// Copy with enrichment switched on or off for both tasks.
    pub fn with_enrichment(&self, on: bool) -> Self {
        let mut c = self.clone();
        c.classifier.enrich = on;
        c.segmenter.enrich = on;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FewshotTask {
    Classification,
    Segmentation,
}

/// Aggregated result over trials. `mean` and `std` are accuracy for
/// classification and held-out mIoU for segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotMetrics {
    pub task: FewshotTask,
    pub n_way: usize,
    pub k_shot: usize,
    pub trials: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class: Option<Vec<Option<f64>>>,
    /// Training-set score per trial (support accuracy or train mIoU).
    pub train_scores: Vec<f64>,
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    SeedKey::root(seed).derive("trial").index(trial as u64).value()
}

fn trial_key(seed: u64, trial: usize) -> SeedKey {
    SeedKey::root(seed).derive("finetune").index(trial as u64)
}

/// Runs `cfg.trials` independent episodes, each with its own support set.
pub fn run_classification(pre: &Pretrained, dataset: &Dataset, cfg: &FewshotConfig, seed: u64) -> Result<FewshotMetrics> {
    cfg.validate("fewshot")?;
    let mut scores = Vec::with_capacity(cfg.trials);
    let mut train_scores = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let episode = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.query_per_class, trial_seed(seed, t))?;
        let trial = finetune_classifier(pre, dataset, &episode, &cfg.classifier, trial_key(seed, t), cfg.precision)?;
        scores.push(trial.accuracy);
        train_scores.push(trial.support_accuracy);
    }
    let (mean, std) = aggregate_trials(&scores)?;
    Ok(FewshotMetrics {
        task: FewshotTask::Classification,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        trials: scores,
        mean,
        std,
        per_class: None,
        train_scores,
    })
}

/// Runs `cfg.trials` segmentation fine-tunes on `k_shot` tiles each and
/// scores held-out tiles. `n_way` reports the number of mask classes.
pub fn run_segmentation(pre: &Pretrained, dataset: &Dataset, cfg: &FewshotConfig, seed: u64) -> Result<FewshotMetrics> {
    cfg.validate("fewshot")?;
    let n_classes = dataset.n_classes();
    let mut scores = Vec::with_capacity(cfg.trials);
    let mut train_scores = Vec::with_capacity(cfg.trials);
    let mut class_sums = vec![(0.0, 0usize); n_classes];
    for t in 0..cfg.trials {
        let split = sample_segmentation_split(dataset, cfg.k_shot, cfg.segmenter.eval_tiles, trial_seed(seed, t))?;
        let trial = finetune_segmenter(pre, dataset, &split, &cfg.segmenter, trial_key(seed, t), cfg.precision)?;
        for (acc, v) in class_sums.iter_mut().zip(&trial.eval_per_class) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
        scores.push(trial.eval_miou);
        train_scores.push(trial.train_miou);
    }
    let (mean, std) = aggregate_trials(&scores)?;
    Ok(FewshotMetrics {
        task: FewshotTask::Segmentation,
        n_way: n_classes,
        k_shot: cfg.k_shot,
        trials: scores,
        mean,
        std,
        per_class: Some(class_sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect()),
        train_scores,
    })
}
