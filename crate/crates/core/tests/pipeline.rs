//! End-to-end training behaviour on a tiny benchmark.

mod common;

use std::collections::BTreeMap;

use scing::checkpoint::{Checkpoint, Stage, TARGETS_ARRAY};
use scing::config::Fusion;
use scing::model::{ScingModel, IMAGE_PREFIX};
use scing::tensor::Tensor;
use scing::trainer::{run_pipeline, run_stage1, run_stage2, EPOCH_LOG};

fn model_arrays(ck: &Checkpoint) -> BTreeMap<String, Tensor> {
    ck.model_arrays()
}

fn with_prefix<'a>(arrays: &'a BTreeMap<String, Tensor>, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
    arrays.iter().filter(move |(k, _)| k.starts_with(prefix))
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    let data = common::tiny_dataset(&cfg);
    cfg.run.threads = 1;
    let (a1, a2) = run_pipeline(&cfg, &data).unwrap();
    cfg.run.threads = 3;
    let (b1, b2) = run_pipeline(&cfg, &data).unwrap();
    assert_eq!(a1.checkpoint.arrays, b1.checkpoint.arrays);
    assert_eq!(a2.checkpoint.arrays, b2.checkpoint.arrays);
    assert_eq!(a1.epochs, b1.epochs);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.optim.stage1_epochs = 3;
    cfg.optim.stage2_epochs = 3;
    cfg.run.checkpoint_every_epoch = true;
    let data = common::tiny_dataset(&cfg);
    let out = cfg.run.out_dir.clone();

    let full1 = run_stage1(&cfg, &data, None).unwrap();
    let mid1 = Checkpoint::load(&out.join("stage1.latest.ckpt")).unwrap();
    assert_eq!(mid1.meta.epoch, 2);
    let resumed1 = run_stage1(&cfg, &data, Some(&mid1)).unwrap();
    assert_eq!(resumed1.checkpoint.arrays, full1.checkpoint.arrays);

    let full2 = run_stage2(&cfg, &data, &full1.checkpoint, None).unwrap();
    let mid2 = Checkpoint::load(&out.join("stage2.latest.ckpt")).unwrap();
    assert_eq!((mid2.meta.stage, mid2.meta.epoch), (Stage::Stage2, 2));
    let resumed2 = run_stage2(&cfg, &data, &full1.checkpoint, Some(&mid2)).unwrap();
    assert_eq!(resumed2.checkpoint.arrays, full2.checkpoint.arrays);
}

#[test]
fn stages_train_disjoint_parameter_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    assert_eq!(cfg.svip.fusion, Fusion::Svip);
    let data = common::tiny_dataset(&cfg);
    let init = ScingModel::new(&cfg, data.classes(), cfg.run.seed).unwrap().named_arrays();
    let (s1, s2) = run_pipeline(&cfg, &data).unwrap();
    let a1 = model_arrays(&s1.checkpoint);
    let a2 = model_arrays(&s2.checkpoint);

    for prefix in [IMAGE_PREFIX, "text."] {
        for (k, v) in with_prefix(&init, prefix) {
            assert_eq!(&a1[k], v, "{k} moved in stage 1");
        }
    }
    for prefix in ["prompt.", "svip."] {
        assert!(with_prefix(&init, prefix).any(|(k, v)| &a1[k] != v), "{prefix} did not train");
    }

    for (k, v) in &a1 {
        if k.starts_with(IMAGE_PREFIX) {
            continue;
        }
        assert_eq!(&a2[k], v, "{k} moved in stage 2");
    }
    assert!(with_prefix(&a1, IMAGE_PREFIX).any(|(k, v)| &a2[k] != v));
    let targets = &s2.checkpoint.arrays[TARGETS_ARRAY];
    assert_eq!(targets.shape(), (data.classes(), cfg.model.image.embed_dim));
}

#[test]
fn epoch_log_covers_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let data = common::tiny_dataset(&cfg);
    let (s1, s2) = run_pipeline(&cfg, &data).unwrap();
    assert_eq!(s1.epochs.len(), cfg.optim.stage1_epochs);
    assert_eq!(s2.epochs.len(), cfg.optim.stage2_epochs);
    assert!(s1.epochs.iter().all(|e| e.total.is_finite()));
    let text = std::fs::read_to_string(cfg.run.out_dir.join(EPOCH_LOG)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("stage,epoch,lr"));
    assert_eq!(lines.len(), 1 + cfg.optim.stage1_epochs + cfg.optim.stage2_epochs);
}

#[test]
fn resume_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let data = common::tiny_dataset(&cfg);
    let (s1, s2) = run_pipeline(&cfg, &data).unwrap();
    let err = run_stage1(&cfg, &data, Some(&s2.checkpoint)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let mut wrong = s1.checkpoint.clone();
    wrong.meta.class_ids.reverse();
    assert!(run_stage1(&cfg, &data, Some(&wrong)).is_err());
}
