use genco_core::dataio::{synth_dataset, AugmentConfig, Dataset, SynthSpec, Task};
use genco_core::encoder::EncoderConfig;
use genco_core::fewshot::{
    backbone_fingerprint, extract_features, run_classification, run_segmentation, sample_segmentation_split,
    finetune_segmenter, FewshotConfig, SegmenterConfig,
};
use genco_core::genco::{GencoConfig, NoiseSpec};
use genco_core::numcore::Precision;
use genco_core::pretrain::{pretrain_run, PretrainConfig, Pretrained, RunOptions, TrainState};
use genco_core::Error;
use serde_json::json;

fn encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 4,
        stage_widths: vec![4, 4, 8, 8],
        blocks_per_stage: 1,
        feature_dim: 8,
        projection_dim: 8,
    }
}

fn pretrained(dir: &std::path::Path, ds: &Dataset, no_generator: bool) -> Pretrained {
    let genco = GencoConfig {
        bank_capacity: 16,
        noise: NoiseSpec {
            dim: 4,
            ..NoiseSpec::default()
        },
        ..GencoConfig::default()
    };
    let cfg = PretrainConfig {
        epochs: 1,
        batch_size: 4,
        lr_milestones: vec![],
        bn_groups: 2,
        no_generator,
        augment: AugmentConfig {
            output_size: 32,
            ..PretrainConfig::default().augment
        },
        ..PretrainConfig::default()
    };
    let mut state = TrainState::new(&encoder(), &genco, &cfg, 1).unwrap();
    let opts = RunOptions {
        out_dir: dir.to_path_buf(),
        threads: 1,
        provenance: json!({}),
        stop_after: None,
    };
    let report = pretrain_run(&mut state, ds, &opts).unwrap();
    Pretrained::load(&report.checkpoint).unwrap()
}

fn corpus(dir: &std::path::Path, task: Task, n_per_class: usize) -> Dataset {
    let spec = SynthSpec {
        n_classes: 3,
        n_per_class,
        channels: 4,
        size: 32,
        seed: 2,
        task,
    };
    synth_dataset(&spec, dir, json!({})).unwrap();
    Dataset::open(dir).unwrap()
}

fn small_fewshot() -> FewshotConfig {
    let mut cfg = FewshotConfig {
        k_shot: 2,
        query_per_class: 3,
        trials: 2,
        ..FewshotConfig::default()
    };
    cfg.classifier.epochs = 5;
    cfg.segmenter = SegmenterConfig {
        epochs: 2,
        steps_per_epoch: 3,
        batch_size: 2,
        eval_tiles: 2,
        ..SegmenterConfig::default()
    };
    cfg
}

#[test]
fn loaded_checkpoint_reproduces_features() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = corpus(&tmp.path().join("cls"), Task::Classification, 4);
    let pre = pretrained(&tmp.path().join("run"), &ds, false);
    let again = Pretrained::load(&tmp.path().join("run/checkpoint")).unwrap();
    let tiles: Vec<_> = ds.tiles().take(5).collect();
    let a = extract_features(&pre, &tiles, Precision::F32).unwrap();
    let b = extract_features(&again, &tiles, Precision::F32).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[5, 8]);
}

#[test]
fn classification_trials_are_deterministic_and_bounded() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = corpus(&tmp.path().join("cls"), Task::Classification, 6);
    let pre = pretrained(&tmp.path().join("run"), &ds, false);
    let before = backbone_fingerprint(&pre.store);
    let cfg = small_fewshot();
    let a = run_classification(&pre, &ds, &cfg, 3).unwrap();
    let b = run_classification(&pre, &ds, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trials.len(), 2);
    assert!(a.trials.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(backbone_fingerprint(&pre.store), before);
}

#[test]
fn enrichment_requires_a_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = corpus(&tmp.path().join("cls"), Task::Classification, 6);
    let pre = pretrained(&tmp.path().join("run"), &ds, true);
    assert!(pre.generator.is_none());
    let cfg = small_fewshot();
    assert!(matches!(run_classification(&pre, &ds, &cfg, 0), Err(Error::InvalidArgument(_))));
    run_classification(&pre, &ds, &cfg.with_enrichment(false), 0).unwrap();
}

#[test]
fn segmentation_trials_report_per_class_iou() {
    let tmp = tempfile::tempdir().unwrap();
    let cls = corpus(&tmp.path().join("cls"), Task::Classification, 4);
    let pre = pretrained(&tmp.path().join("run"), &cls, false);
    let seg = corpus(&tmp.path().join("seg"), Task::Segmentation, 3);
    let cfg = small_fewshot();
    let m = run_segmentation(&pre, &seg, &cfg, 4).unwrap();
    assert_eq!(m, run_segmentation(&pre, &seg, &cfg, 4).unwrap());
    assert_eq!(m.n_way, 4);
    assert_eq!(m.per_class.as_ref().unwrap().len(), 4);
    assert!(m.trials.iter().chain(&m.train_scores).all(|v| (0.0..=1.0).contains(v)));

    let split = sample_segmentation_split(&seg, 2, 2, 0).unwrap();
    let mut no_enrich = cfg.segmenter.clone();
    no_enrich.enrich = false;
    let trial = finetune_segmenter(&pre, &seg, &split, &no_enrich, genco_core::numcore::SeedKey::root(0), Precision::F32)
        .unwrap();
    assert_eq!(trial.train_tiles, 2);
}
