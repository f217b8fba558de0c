use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genco_core::dataio::{synth_dataset, Dataset, Task};
use genco_core::oracle;
use genco_core::pretrain::{pretrain_run, Pretrained, RunOptions, TrainState};
use genco_core::run::{dataset_task, render_markdown, run_ablation, run_fewshot, MetricsDocument, RunConfig};
use genco_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "genco", version, about = "Contrastive pretraining with a feature generator, plus few-shot fine-tuning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (to --out, or to data.path).
    Synth,
    /// Contrastive pretraining.
    Pretrain {
        /// Resume from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Few-shot linear classification trials on a pretrained encoder.
    FinetuneCls,
    /// Few-shot segmentation decoder trials on a pretrained encoder.
    FinetuneSeg,
    /// Frozen-feature evaluation without generator enrichment.
    Eval,
    /// Finite-difference gradient oracles.
    Gradcheck,
    /// Generator ablation across shot counts.
    Ablate,
    /// Render metrics or ablation JSON as markdown.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn threads() -> Result<usize, Error> {
    match std::env::var("GENCO_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config("GENCO_THREADS", format!("expected a positive integer, got {v:?}"))),
        },
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("artifact", e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn open_dataset(cfg: &RunConfig, expect: Option<Task>) -> Result<Dataset, Error> {
    let ds = Dataset::open(&cfg.data.path)?;
    if let Some(task) = expect {
        if dataset_task(&ds) != task {
            return Err(Error::config("data.path", format!("dataset at {} is not a {task:?} corpus", cfg.data.path.display())));
        }
    }
    Ok(ds)
}

fn synth(common: &Common) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(out) = &common.out {
        cfg.data.path = out.clone();
    }
    synth_dataset(&cfg.synth_spec(), &cfg.data.path, cfg.provenance("synth"))?;
    println!("wrote {} tiles to {}", cfg.synth_spec().total(), cfg.data.path.display());
    Ok(())
}

fn pretrain(common: &Common, resume: Option<&Path>) -> CmdResult {
    let cfg = load_config(common)?;
    let threads = threads()?;
    let ds = open_dataset(&cfg, None)?;
    let mut state = match resume {
        Some(dir) => TrainState::load(dir)?,
        None => TrainState::new(&cfg.encoder, &cfg.genco, &cfg.pretrain, cfg.seed)?,
    };
    let opts = RunOptions {
        out_dir: cfg.output.dir.clone(),
        threads,
        provenance: cfg.provenance("pretrain"),
        stop_after: None,
    };
    let report = pretrain_run(&mut state, &ds, &opts)?;
    for (epoch, mean) in report.epoch_means().iter().enumerate() {
        println!("epoch {} loss {mean:.6}", epoch + 1);
    }
    println!("checkpoint {}", report.checkpoint.display());
    Ok(())
}

fn finetune(common: &Common, task: Option<Task>, enrich: Option<bool>, file: &str) -> CmdResult {
    let cfg = load_config(common)?;
    let ds = open_dataset(&cfg, task)?;
    let checkpoint = cfg.checkpoint_path();
    let pre = Pretrained::load(&checkpoint)?;
    let mut fcfg = cfg.fewshot.clone();
    if let Some(on) = enrich {
        fcfg = fcfg.with_enrichment(on);
    }
    let enrich = match dataset_task(&ds) {
        Task::Classification => fcfg.classifier.enrich,
        Task::Segmentation => fcfg.segmenter.enrich,
    };
    let metrics = run_fewshot(&pre, &ds, &fcfg, cfg.seed)?;
    println!(
        "{:?} {}-way {}-shot mean {:.4} std {:.4}",
        metrics.task, metrics.n_way, metrics.k_shot, metrics.mean, metrics.std
    );
    let doc = MetricsDocument {
        metrics,
        enrich,
        checkpoint,
        provenance: cfg.provenance(file.trim_end_matches(".json")),
    };
    write_json(&cfg.output.dir.join(file), &doc)?;
    Ok(())
}

fn gradcheck(common: &Common) -> CmdResult {
    let results = oracle::run_all()?;
    for r in &results {
        println!("{}", serde_json::to_string(r).map_err(|e| Error::json("suite result", e))?);
    }
    if let Some(out) = &common.out {
        write_json(&out.join("gradcheck.json"), &results)?;
    }
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(Failure::Oracle(format!(
            "suite {} max relative error {:e} exceeds {:e}",
            r.suite, r.max_rel_error, r.tolerance
        ))),
        None => Ok(()),
    }
}

fn ablate(common: &Common) -> CmdResult {
    let cfg = load_config(common)?;
    let threads = threads()?;
    let ds = open_dataset(&cfg, None)?;
    let report = run_ablation(&cfg, &ds, threads)?;
    let value = serde_json::to_value(&report).map_err(|e| Error::json("ablation", e))?;
    let md = render_markdown(&value)?;
    write_json(&cfg.output.dir.join("ablation.json"), &report)?;
    write_text(&cfg.output.dir.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn report(common: &Common, inputs: &[PathBuf]) -> CmdResult {
    let mut out = String::new();
    for path in inputs {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("## {}\n\n", path.display()));
        out.push_str(&render_markdown(&doc)?);
    }
    if let Some(dir) = &common.out {
        write_text(&dir.join("report.md"), &out)?;
    }
    print!("{out}");
    Ok(())
}

fn fail(code: u8, kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return fail(1, "usage", first);
        }
    };
    let result = match &cli.command {
        Command::Synth => synth(&cli.common),
        Command::Pretrain { resume } => pretrain(&cli.common, resume.as_deref()),
        Command::FinetuneCls => finetune(&cli.common, Some(Task::Classification), None, "cls_metrics.json"),
        Command::FinetuneSeg => finetune(&cli.common, Some(Task::Segmentation), None, "seg_metrics.json"),
        Command::Eval => finetune(&cli.common, None, Some(false), "eval_metrics.json"),
        Command::Gradcheck => gradcheck(&cli.common),
        Command::Ablate => ablate(&cli.common),
        Command::Report { inputs } => report(&cli.common, inputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Oracle(msg)) => fail(3, "oracle", msg),
        Err(Failure::Core(e)) => {
            let code = if matches!(e, Error::Config { .. }) { 1 } else { 2 };
            fail(code, e.kind(), e.to_string())
        }
    }
}
