//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use genco_core::dataio::{synth_dataset, Dataset, SynthSpec, Task};
use genco_core::encoder::{expand_input_channels, expand_store_to_nir, EncoderConfig, EncoderModel, STEM_WEIGHT};
use genco_core::fewshot::{
    enrich, miou, run_classification, run_segmentation, sample_episode, FewshotConfig, RowSource, SegmenterConfig,
};
use genco_core::genco::{
    genco_loss, loss_from_similarities, momentum_update, GencoConfig, Generator, LossOptions, MemoryBank, NoiseSpec,
};
use genco_core::numcore::{Checkpoint, Graph, ParamStore, Precision, SeedKey, Tensor};
use genco_core::oracle;
use genco_core::pretrain::{lr_at_epoch, pretrain_run, PretrainConfig, PretrainReport, Pretrained, RunOptions, TrainState};
use rand::Rng;
use serde_json::json;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Desk-scale classification pretraining shared by several criteria.
struct Desk {
    _tmp: tempfile::TempDir,
    dataset: Dataset,
    state: TrainState,
    report: PretrainReport,
    seconds: f64,
}

fn desk() -> Desk {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_classes: 3,
        n_per_class: 200,
        channels: 4,
        size: 32,
        seed: 0,
        task: Task::Classification,
    };
    synth_dataset(&spec, &tmp.path().join("data"), json!({})).unwrap();
    let dataset = Dataset::open(&tmp.path().join("data")).unwrap();
    let cfg = PretrainConfig::default();
    let mut state = TrainState::new(&EncoderConfig::default(), &GencoConfig::default(), &cfg, 0).unwrap();
    let opts = RunOptions {
        out_dir: tmp.path().join("pretrain"),
        threads: 1,
        provenance: json!({}),
        stop_after: None,
    };
    let start = Instant::now();
    let report = pretrain_run(&mut state, &dataset, &opts).unwrap();
    Desk {
        _tmp: tmp,
        dataset,
        state,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let r = oracle::genco_loss_suite(20, false).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(r.passed, || format!("max relative error {:e}", r.max_rel_error))?;
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("20 instances, max relative error {:.2e}, {secs:.2}s", r.max_rel_error))
}

fn loss_value(neg: &[Vec<f64>], pos: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph::new(Precision::F64);
    let rows = |m: &[Vec<f64>]| Tensor::new([m.len(), m[0].len()], m.concat()).unwrap();
    let p = g.constant(rows(pos));
    let n = (!neg[0].is_empty()).then(|| g.constant(rows(neg)));
    let l = loss_from_similarities(&mut g, n, p, tau).unwrap();
    g.value(l).item()
}

fn loss_invariants() -> Outcome {
    let mut rng = SeedKey::root(2).derive("acceptance-invariants").rng();
    let delta = 1e-3;
    for inst in 0..1000 {
        let b = rng.gen_range(1..=3);
        let n = if inst % 5 == 0 { 0 } else { rng.gen_range(1..=8) };
        let p = rng.gen_range(1..=2);
        let tau = rng.gen_range(0.1..1.0);
        let mut sims = |cols: usize| -> Vec<Vec<f64>> {
            (0..b).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let neg = sims(n);
        let pos = sims(p);
        let base = loss_value(&neg, &pos, tau);
        check(base >= 0.0, || format!("instance {inst}: negative loss {base}"))?;
        check((base == 0.0) == (n == 0), || format!("instance {inst}: loss {base} with {n} negatives"))?;
        if n == 0 {
            continue;
        }
        for i in 0..b {
            for j in 0..n {
                let mut bumped = neg.clone();
                bumped[i][j] += delta;
                let v = loss_value(&bumped, &pos, tau);
                check(v > base, || format!("instance {inst}: not increasing in negative ({i},{j})"))?;
            }
            for j in 0..p {
                let mut bumped = pos.clone();
                bumped[i][j] += delta;
                let v = loss_value(&neg, &bumped, tau);
                check(v < base, || format!("instance {inst}: not decreasing in positive ({i},{j})"))?;
            }
        }
    }
    // τ = 1, one negative: q·k = 1, q′·k = 0.5, q·k⁻ = 0.
    let t = |v: &[f64]| Tensor::new([1, 2], v.to_vec()).unwrap();
    let mut g = Graph::new(Precision::F64);
    let q = g.constant(t(&[1.0, 0.0]));
    let qp = g.constant(t(&[0.5, 0.75f64.sqrt()]));
    let k = g.constant(t(&[1.0, 0.0]));
    let mut bank = MemoryBank::new(1, 2).unwrap();
    bank.enqueue(&t(&[0.0, 1.0])).unwrap();
    let l = genco_loss(&mut g, q, qp, k, &bank, LossOptions::new(1.0)).unwrap();
    let got = g.value(l).item();
    let num = 1.0f64.exp() + 0.5f64.exp();
    let want = -(num / (num + 1.0)).ln();
    check((got - want).abs() <= 1e-9, || format!("hand value {got} vs oracle {want}"))?;
    Ok(format!("1000 instances; hand value {got:.12} matches oracle"))
}

fn bank_and_momentum(desk: &Desk) -> Outcome {
    let mut rng = SeedKey::root(3).derive("acceptance-fifo").rng();
    let (capacity, dim) = (29, 4);
    let mut bank = MemoryBank::new(capacity, dim).unwrap();
    let mut shadow: std::collections::VecDeque<Vec<f64>> = Default::default();
    for step in 0..1000 {
        let b = rng.gen_range(1..=capacity);
        let batch: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        bank.enqueue(&Tensor::new([b, dim], batch.concat()).unwrap()).unwrap();
        for row in batch {
            if shadow.len() == capacity {
                shadow.pop_front();
            }
            shadow.push_back(row);
        }
        let expected: Vec<Vec<f64>> = shadow.iter().cloned().collect();
        check(bank.keys_in_arrival_order() == expected, || format!("bank diverged at batch {step}"))?;
    }

    let mut online = ParamStore::new();
    Generator::register(&mut online, 6, 3, SeedKey::root(4)).unwrap();
    let mut offline = ParamStore::new();
    for (_, p) in online.iter() {
        let t = Tensor::from_fn(p.value.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
        offline.add(p.name.clone(), t, p.trainable).unwrap();
    }
    let before = offline.clone();
    let m = 0.99;
    momentum_update(&online, &mut offline, m, Precision::F64).unwrap();
    let mut worst: f64 = 0.0;
    for ((_, q), ((_, k0), (_, k1))) in online.iter().zip(before.iter().zip(offline.iter())) {
        for ((a, b), c) in q.value.data().iter().zip(k0.value.data()).zip(k1.value.data()) {
            let want = m * b + (1.0 - m) * a;
            worst = worst.max((want - c).abs() / want.abs().max(f64::MIN_POSITIVE));
        }
    }
    check(worst <= 4.0 * f64::EPSILON, || format!("momentum relative error {worst:e}"))?;

    let steps = desk.report.records.len() as u64;
    check(desk.state.offline_grad_checks == steps && steps > 0, || {
        format!("{} gradient checks over {steps} steps", desk.state.offline_grad_checks)
    })?;
    Ok(format!(
        "FIFO over 1000 batches; momentum error {worst:.1e}; no offline gradient in {steps} desk steps"
    ))
}

fn lr_schedules() -> Outcome {
    let cfg = PretrainConfig {
        epochs: 200,
        base_lr: 0.3,
        lr_milestones: vec![(140, 0.03), (160, 0.003)],
        ..PretrainConfig::default()
    };
    for epoch in 0..200 {
        let want = match epoch {
            0..=139 => 0.3,
            140..=159 => 0.03,
            _ => 0.003,
        };
        let got = lr_at_epoch(&cfg, epoch).map_err(|e| e.to_string())?;
        check(got == want, || format!("epoch {epoch}: {got} != {want}"))?;
    }
    let s = SegmenterConfig::default().schedule();
    let top = s.peak_step();
    let last = s.total_steps - 1;
    check(s.lr(0) < s.peak, || "warmup does not start below peak".into())?;
    check(s.lr(top) == s.peak, || format!("lr at step {top} is {}", s.lr(top)))?;
    check(s.lr(last) < s.lr(0), || "final lr not below initial".into())?;
    Ok(format!(
        "milestones exact over 200 epochs; one-cycle {:.2e} -> {:.2e} @{top} -> {:.2e}",
        s.lr(0),
        s.peak,
        s.lr(last)
    ))
}

fn enrichment_cardinality() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_classes: 9,
        n_per_class: 12,
        channels: 4,
        size: 8,
        seed: 5,
        task: Task::Classification,
    };
    synth_dataset(&spec, tmp.path(), json!({})).unwrap();
    let ds = Dataset::open(tmp.path()).unwrap();
    let episode = sample_episode(&ds, 9, 10, 1, 5).map_err(|e| e.to_string())?;
    let dim = 16;
    let mut store = ParamStore::new();
    let gen = Generator::register(&mut store, dim, 8, SeedKey::root(5)).unwrap();
    let mut rng = SeedKey::root(6).rng();
    let features = Tensor::from_fn([episode.support.len(), dim], |_| rng.gen_range(-1.0..1.0));
    let labels = episode.support_labels();
    let noise = NoiseSpec {
        dim: 8,
        ..NoiseSpec::default()
    };
    let set = enrich(&features, &labels, &gen, &store, &noise, SeedKey::root(7), Precision::F64).map_err(|e| e.to_string())?;
    let m = labels.len();
    check(m == 90, || format!("{m} support rows"))?;
    check(set.features.shape() == [180, dim], || format!("shape {:?}", set.features.shape()))?;
    check(set.labels.len() == 180, || format!("{} labels", set.labels.len()))?;
    check(set.labels[..m] == labels[..] && set.labels[m..] == labels[..], || "labels not copied".into())?;
    check(set.features.row(0) == features.row(0), || "real rows altered".into())?;
    check(
        set.provenance.iter().filter(|p| **p == RowSource::Generated).count() == 90,
        || "provenance count".into(),
    )?;
    Ok("9-way 10-shot: 90 real + 90 generated = 180 rows, labels copied".into())
}

fn desk_classification(desk: &Desk) -> Outcome {
    let means = desk.report.epoch_means();
    let (first, last) = (means[0], *means.last().unwrap());
    let pre = Pretrained::from_state(&desk.state, json!({}));
    let start = Instant::now();
    let m = run_classification(&pre, &desk.dataset, &FewshotConfig::default(), 0).map_err(|e| e.to_string())?;
    let total = desk.seconds + start.elapsed().as_secs_f64();
    check(m.mean >= 0.90, || format!("mean query accuracy {:.4} ({:?})", m.mean, m.trials))?;
    check(last < first, || format!("final epoch loss {last:.4} not below first {first:.4}"))?;
    check(total < 15.0 * 60.0, || format!("took {total:.0}s"))?;
    Ok(format!(
        "accuracy {:.4} over {:?}; loss {first:.3} -> {last:.3}; {total:.0}s",
        m.mean, m.trials
    ))
}

fn genco_bin() -> &'static str {
    env!("CARGO_BIN_EXE_genco")
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(genco_bin())
        .args(args)
        .current_dir(cwd)
        .env("GENCO_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "genco {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Every regular file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn ablation_shape() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    run_cli(&["synth", "--out", "data"], cwd)?;
    run_cli(&["ablate", "--out", "ablate"], cwd)?;
    let first = snapshot(&cwd.join("ablate"));
    run_cli(&["ablate", "--out", "ablate"], cwd)?;
    let second = snapshot(&cwd.join("ablate"));
    check(first == second, || "ablation artifacts differ between repeats".into())?;

    let doc: serde_json::Value = serde_json::from_slice(&first[Path::new("ablation.json")]).unwrap();
    let table = doc["table"].as_array().ok_or("no table")?;
    let shots: Vec<u64> = doc["shots"].as_array().ok_or("no shots")?.iter().filter_map(|v| v.as_u64()).collect();
    check(shots == [10, 5, 1], || format!("shots {shots:?}"))?;
    check(doc["arms"].as_array().map(|a| a.len()) == Some(3), || "arm count".into())?;
    check(table.len() == 3, || format!("{} rows", table.len()))?;
    let mut cells = Vec::new();
    for row in table {
        let row = row.as_array().ok_or("row")?;
        check(row.len() == 3, || format!("{} columns", row.len()))?;
        for v in row {
            let v = v.as_f64().ok_or("non-numeric cell")?;
            check(v.is_finite() && (0.0..=1.0).contains(&v), || format!("cell {v}"))?;
            cells.push(v);
        }
    }
    let md = String::from_utf8_lossy(&first[Path::new("ablation.md")]).into_owned();
    let rows = md.lines().filter(|l| l.contains(" shot |")).count();
    check(rows == 3, || format!("markdown has {rows} shot rows"))?;
    Ok(format!("3x3 table {cells:.3?}, byte-identical across repeats"))
}

fn desk_segmentation(desk: &Desk) -> Outcome {
    let hand = miou(&[&[0, 1, 1, 1]], &[&[0, 0, 1, 1]], 2, 255).map_err(|e| e.to_string())?;
    check(hand.mean == 7.0 / 12.0, || format!("2x2 case gives {:?}", hand.mean))?;

    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_classes: 3,
        n_per_class: 20,
        channels: 4,
        size: 32,
        seed: 0,
        task: Task::Segmentation,
    };
    synth_dataset(&spec, tmp.path(), json!({})).unwrap();
    let ds = Dataset::open(tmp.path()).unwrap();
    let pre = Pretrained::from_state(&desk.state, json!({}));
    let m = run_segmentation(&pre, &ds, &FewshotConfig::default(), 0).map_err(|e| e.to_string())?;
    let train = m.train_scores.iter().sum::<f64>() / m.train_scores.len() as f64;
    check(train >= 0.95, || format!("train mIoU {train:.4} ({:?})", m.train_scores))?;
    check(m.mean >= 0.50, || format!("held-out mIoU {:.4} ({:?})", m.mean, m.trials))?;
    Ok(format!(
        "2x2 case = 7/12 exactly; train mIoU {train:.4}, held-out {:.4} over {:?}",
        m.mean, m.trials
    ))
}

fn nir_expansion() -> Outcome {
    let mut rng = SeedKey::root(9).rng();
    let w = Tensor::from_fn([5, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let e = expand_input_channels(&w).map_err(|e| e.to_string())?;
    for o in 0..5 {
        let slice = |c: usize| e.data()[(o * 4 + c) * 9..(o * 4 + c + 1) * 9].to_vec();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        check(bits(slice(3)) == bits(slice(0)), || format!("filter {o}: slice 3 differs from slice 0"))?;
    }

    // 3-channel model through a checkpoint, then widened to 4 channels.
    let cfg3 = EncoderConfig {
        in_channels: 3,
        stage_widths: vec![8, 16],
        feature_dim: 16,
        projection_dim: 8,
        ..EncoderConfig::default()
    };
    let mut store3 = ParamStore::new();
    let model3 = EncoderModel::register(&cfg3, &mut store3, SeedKey::root(10)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut ck = Checkpoint::new(json!({"encoder": cfg3}));
    ck.extend(store3.to_named(""));
    ck.save(tmp.path(), Precision::F64).unwrap();
    let loaded = Checkpoint::load(tmp.path()).unwrap();
    let mut store4 = ParamStore::new();
    EncoderModel::register(&cfg3, &mut store4, SeedKey::root(11)).unwrap();
    store4.load_named("", &loaded.with_prefix("")).map_err(|e| e.to_string())?;
    let cfg4 = expand_store_to_nir(&cfg3, &mut store4).map_err(|e| e.to_string())?;
    let model4 = EncoderModel::attach(&cfg4, &store4).map_err(|e| e.to_string())?;

    // Probe with NIR equal to red: the 4-channel stem output must equal the
    // 3-channel stem output plus the red-only contribution.
    let (h, wd) = (8, 8);
    let rgb = Tensor::from_fn([2, 3, h, wd], |_| rng.gen_range(0.0..1.0));
    let mut rgbn = Vec::with_capacity(2 * 4 * h * wd);
    let mut red_only = vec![0.0; 2 * 3 * h * wd];
    for b in 0..2 {
        let plane = |c: usize| &rgb.data()[(b * 3 + c) * h * wd..(b * 3 + c + 1) * h * wd];
        for c in 0..3 {
            rgbn.extend_from_slice(plane(c));
        }
        rgbn.extend_from_slice(plane(0));
        red_only[b * 3 * h * wd..b * 3 * h * wd + h * wd].copy_from_slice(plane(0));
    }
    let rgbn = Tensor::new([2, 4, h, wd], rgbn).unwrap();
    let red_only = Tensor::new([2, 3, h, wd], red_only).unwrap();

    let stem = |model: &EncoderModel, store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new(Precision::F64);
        let p = store.bind_frozen(&mut g);
        let x = g.constant(x.clone());
        let y = model.stem_conv(&mut g, &p, x).unwrap();
        g.value(y).clone()
    };
    let y4 = stem(&model4, &store4, &rgbn);
    let y3 = stem(&model3, &store3, &rgb);
    let yr = stem(&model3, &store3, &red_only);
    let mut worst: f64 = 0.0;
    for ((a, b), c) in y4.data().iter().zip(y3.data()).zip(yr.data()) {
        worst = worst.max((a - (b + c)).abs());
    }
    check(worst <= 1e-12, || format!("stem identity error {worst:e}"))?;
    check(
        store4.by_name(STEM_WEIGHT).unwrap().value.shape()[1] == 4,
        || "stem not widened".into(),
    )?;
    Ok(format!("slice 3 == slice 0 bitwise; stem identity holds to {worst:.1e}"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    let config = json!({
        "data": {"n_per_class": 60},
        "pretrain": {"epochs": 4, "lr_milestones": [[3, 0.003]], "checkpoint_every": 2},
        "fewshot": {"classifier": {"epochs": 20}, "ablation_shots": [5, 1]},
    });
    std::fs::write(cwd.join("config.json"), config.to_string()).unwrap();
    let commands: [&[&str]; 6] = [
        &["synth", "--out", "data"],
        &["pretrain", "--out", "run"],
        &["finetune-cls", "--out", "run"],
        &["eval", "--out", "run"],
        &["gradcheck", "--out", "run"],
        &["report", "run/cls_metrics.json", "--out", "run"],
    ];
    let seg_config = json!({
        "data": {"path": "seg", "task": "segmentation", "n_per_class": 10},
        "output": {"checkpoint": "run/checkpoint"},
        "fewshot": {"k_shot": 5, "segmenter": {"epochs": 2, "steps_per_epoch": 10, "eval_tiles": 5}},
    });
    std::fs::write(cwd.join("seg.json"), seg_config.to_string()).unwrap();
    let commands: Vec<(&[&str], &str)> = commands
        .into_iter()
        .map(|c| (c, "config.json"))
        .chain([
            (&["synth", "--out", "seg"][..], "seg.json"),
            (&["finetune-seg", "--out", "segrun"][..], "seg.json"),
        ])
        .collect();
    let mut compared = 0;
    for (cmd, config) in commands {
        let mut args = cmd.to_vec();
        args.extend(["--config", config, "--seed", "7"]);
        let dir = cwd.join(cmd[cmd.len() - 1]);
        run_cli(&args, cwd)?;
        let first = snapshot(&dir);
        run_cli(&args, cwd)?;
        let second = snapshot(&dir);
        check(first == second, || format!("`genco {}` output differs on repeat", cmd[0]))?;
        compared += second.len();
    }
    let args = vec!["ablate", "--out", "ablate", "--config", "config.json", "--seed", "7"];
    run_cli(&args, cwd)?;
    let first = snapshot(&cwd.join("ablate"));
    run_cli(&args, cwd)?;
    check(first == snapshot(&cwd.join("ablate")), || "`genco ablate` output differs on repeat".into())?;
    Ok(format!("8 subcommands repeated; {} artifact files byte-identical", compared + first.len()))
}

fn main() {
    let started = Instant::now();
    let shared = std::cell::OnceCell::new();
    let shared_desk = || shared.get_or_init(desk);

    let criteria: Vec<(&str, Box<dyn FnMut() -> Outcome>)> = vec![
        ("gradient oracle", Box::new(gradient_oracle)),
        ("loss invariants", Box::new(loss_invariants)),
        ("bank and momentum exactness", Box::new(|| bank_and_momentum(shared_desk()))),
        ("learning-rate schedules", Box::new(lr_schedules)),
        ("enrichment cardinality", Box::new(enrichment_cardinality)),
        ("desk-scale classification", Box::new(|| desk_classification(shared_desk()))),
        ("ablation shape", Box::new(ablation_shape)),
        ("desk-scale segmentation", Box::new(|| desk_segmentation(shared_desk()))),
        ("NIR expansion", Box::new(nir_expansion)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failures = 0;
    for (i, (name, mut f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed in {:.0}s",
        10 - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
