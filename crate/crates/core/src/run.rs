//! Whole-run configuration and the commands built on top of it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{Dataset, SynthSpec, Task};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fewshot::{run_classification, run_segmentation, FewshotConfig, FewshotMetrics};
use crate::genco::GencoConfig;
use crate::pretrain::{pretrain_run, PretrainConfig, Pretrained, RunOptions, TrainState, FINAL_CHECKPOINT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory read by training commands and written by `synth`.
    pub path: PathBuf,
    pub task: Task,
    /// Classes for classification; foreground classes for segmentation.
    pub n_classes: usize,
    pub n_per_class: usize,
    pub channels: usize,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data"),
            task: Task::Classification,
            n_classes: 3,
            n_per_class: 200,
            channels: 4,
            size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Where commands write their artifacts.
    pub dir: PathBuf,
    /// Pretrained checkpoint for the fine-tuning commands; defaults to the
    /// final checkpoint under `dir`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub genco: GencoConfig,
    pub pretrain: PretrainConfig,
    pub fewshot: FewshotConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses and validates a JSON document. Errors name the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "$".to_string() } else { path };
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        if self.data.n_per_class == 0 {
            return Err(Error::config("data.n_per_class", "must be positive"));
        }
        self.encoder.validate("encoder")?;
        self.genco.validate("genco")?;
        self.pretrain.validate("pretrain")?;
        self.fewshot.validate("fewshot")?;
        if self.encoder.in_channels != self.data.channels {
            return Err(Error::config("encoder.in_channels", "must equal data.channels"));
        }
        if self.pretrain.batch_size > self.genco.bank_capacity {
            return Err(Error::config("pretrain.batch_size", "must not exceed genco.bank_capacity"));
        }
        if self.pretrain.augment.output_size > self.data.size {
            return Err(Error::config("pretrain.augment.output_size", "must not exceed data.size"));
        }
        if self.data.task == Task::Segmentation {
            if self.data.size % 32 != 0 {
                return Err(Error::config("data.size", "segmentation tiles need a side divisible by 32"));
            }
            if self.encoder.stage_widths.len() != 4 {
                return Err(Error::config("encoder.stage_widths", "segmentation needs exactly 4 stages"));
            }
            if self.fewshot.segmenter.enrich && self.encoder.projection_dim != self.encoder.feature_dim {
                return Err(Error::config(
                    "encoder.projection_dim",
                    "bottleneck enrichment needs projection_dim equal to feature_dim",
                ));
            }
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_classes: self.data.n_classes,
            n_per_class: self.data.n_per_class,
            channels: self.data.channels,
            size: self.data.size,
            seed: self.seed,
            task: self.data.task,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output.checkpoint.clone().unwrap_or_else(|| self.output.dir.join(FINAL_CHECKPOINT))
    }

    /// Provenance record embedded in every artifact.
    pub fn provenance(&self, command: &str) -> serde_json::Value {
        json!({ "command": command, "seed": self.seed, "config": self })
    }
}

/// Task of a dataset, from its provenance record when present and from the
/// presence of masks otherwise.
pub fn dataset_task(ds: &Dataset) -> Task {
    match &ds.info {
        Some(info) => info.spec.task,
        None if ds.samples.iter().any(|s| s.mask.is_some()) => Task::Segmentation,
        None => Task::Classification,
    }
}

pub fn run_fewshot(pre: &Pretrained, ds: &Dataset, cfg: &FewshotConfig, seed: u64) -> Result<FewshotMetrics> {
    match dataset_task(ds) {
        Task::Classification => run_classification(pre, ds, cfg, seed),
        Task::Segmentation => run_segmentation(pre, ds, cfg, seed),
    }
}

/// A metrics artifact: the aggregated result plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    #[serde(flatten)]
    pub metrics: FewshotMetrics,
    pub enrich: bool,
    pub checkpoint: PathBuf,
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    NoGenerator,
    GeneratorPretrainOnly,
    Genco,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::NoGenerator, Arm::GeneratorPretrainOnly, Arm::Genco];

    pub fn label(self) -> &'static str {
        match self {
            Arm::NoGenerator => "No generator",
            Arm::GeneratorPretrainOnly => "Generator in pretraining only",
            Arm::Genco => "GenCo",
        }
    }

    pub fn pretrain_with_generator(self) -> bool {
        self != Arm::NoGenerator
    }

    pub fn enrich(self) -> bool {
        self == Arm::Genco
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub arm: Arm,
    pub k_shot: usize,
    pub metrics: FewshotMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<Arm>,
    pub shots: Vec<usize>,
    /// `table[shot][arm]` is the mean score.
    pub table: Vec<Vec<f64>>,
    pub cells: Vec<AblationCell>,
    pub provenance: serde_json::Value,
}

/// Pretrains with and without the generator from the same seed, then
/// fine-tunes every arm at every shot count with shared episode seeds.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset, threads: usize) -> Result<AblationReport> {
    cfg.validate()?;
    let provenance = cfg.provenance("ablate");
    let mut pretrained = Vec::new();
    for with_generator in [false, true] {
        let mut pcfg = cfg.pretrain.clone();
        pcfg.no_generator = !with_generator;
        let dir = cfg.output.dir.join("arms").join(if with_generator { "generator" } else { "no-generator" });
        let mut state = TrainState::new(&cfg.encoder, &cfg.genco, &pcfg, cfg.seed)?;
        let opts = RunOptions {
            out_dir: dir,
            threads,
            provenance: provenance.clone(),
            stop_after: None,
        };
        pretrain_run(&mut state, ds, &opts)?;
        pretrained.push(Pretrained::from_state(&state, provenance.clone()));
    }
    let shots = cfg.fewshot.ablation_shots.clone();
    let mut table = Vec::with_capacity(shots.len());
    let mut cells = Vec::new();
    for &k in &shots {
        let mut row = Vec::with_capacity(Arm::ALL.len());
        for arm in Arm::ALL {
            let pre = &pretrained[arm.pretrain_with_generator() as usize];
            let mut fcfg = cfg.fewshot.with_enrichment(arm.enrich());
            fcfg.k_shot = k;
            let metrics = run_fewshot(pre, ds, &fcfg, cfg.seed)?;
            row.push(metrics.mean);
            cells.push(AblationCell { arm, k_shot: k, metrics });
        }
        table.push(row);
    }
    Ok(AblationReport {
        arms: Arm::ALL.to_vec(),
        shots,
        table,
        cells,
        provenance,
    })
}

fn task_name(doc: &serde_json::Value) -> &str {
    doc.get("task").and_then(|t| t.as_str()).unwrap_or("unknown")
}

fn fmt_score(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Renders a metrics or ablation document as a markdown table.
pub fn render_markdown(doc: &serde_json::Value) -> Result<String> {
    if doc.get("table").is_some() {
        let report: AblationReport = serde_json::from_value(doc.clone()).map_err(|e| Error::json("ablation", e))?;
        let task = report.cells.first().map(|c| c.metrics.task);
        let metric = match task {
            Some(crate::fewshot::FewshotTask::Segmentation) => "held-out mIoU",
            _ => "query accuracy",
        };
        let mut out = format!("Generator ablation, mean {metric} (%) over trials\n\n| Shots |");
        for arm in &report.arms {
            out.push_str(&format!(" {} |", arm.label()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(report.arms.len()));
        out.push('\n');
        for (k, row) in report.shots.iter().zip(&report.table) {
            out.push_str(&format!("| {k} shot |"));
            for v in row {
                out.push_str(&format!(" {} |", fmt_score(*v)));
            }
            out.push('\n');
        }
        return Ok(out);
    }
    if doc.get("task").is_some() {
        let m: FewshotMetrics = serde_json::from_value(doc.clone()).map_err(|e| Error::json("metrics", e))?;
        let mut out = format!(
            "{} {}-way {}-shot: {} ± {} (%) over {} trials\n\n| Trial | Score | Train score |\n|---|---|---|\n",
            task_name(doc),
            m.n_way,
            m.k_shot,
            fmt_score(m.mean),
            fmt_score(m.std),
            m.trials.len()
        );
        for (i, (s, t)) in m.trials.iter().zip(&m.train_scores).enumerate() {
            out.push_str(&format!("| {} | {} | {} |\n", i + 1, fmt_score(*s), fmt_score(*t)));
        }
        if let Some(per_class) = &m.per_class {
            out.push_str("\n| Class | IoU |\n|---|---|\n");
            for (c, v) in per_class.iter().enumerate() {
                let cell = v.map(fmt_score).unwrap_or_else(|| "n/a".into());
                out.push_str(&format!("| {c} | {cell} |\n"));
            }
        }
        return Ok(out);
    }
    Err(Error::InvalidArgument("document is neither a metrics nor an ablation record".into()))
}
