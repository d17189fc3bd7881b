use std::fs;
use std::path::Path;

use gaitflow::descriptors::{load_store, Fusion};
use gaitflow::nets::NetworkSpec;
use gaitflow::pipeline::*;
use gaitflow::posepatch::Part;

fn tiny_config(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.corpus_root = root.join("corpus");
    cfg.flow_cache = Some(root.join("flow"));
    cfg.corpus.subjects = 4;
    cfg.corpus.normal_videos = 3;
    cfg.corpus.perturbed_a_videos = 1;
    cfg.corpus.perturbed_b_videos = 0;
    cfg.corpus.gallery_videos = 2;
    cfg.corpus.frames = 32;
    cfg.split.gallery_videos = 2;
    cfg.network = NetworkSpec::tiny_wrn(2);
    cfg.train.batch_size = 8;
    cfg.train.batches_per_epoch = Some(2);
    cfg.train.max_epochs = 2;
    cfg.train.max_val_items = 16;
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn commands_chain_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = cmd_synth(&cfg, false).unwrap();
    assert_eq!(manifest.videos.len(), 16);
    assert!(cmd_synth(&cfg, false).is_err(), "non-empty corpus must be refused");
    assert_eq!(cmd_synth(&cfg, true).unwrap().digest(), manifest.digest());

    assert_eq!(cmd_flow(&cfg).unwrap(), 16);
    let ck = dir.path().join("ck");
    let outcome = cmd_train(&cfg, &ck).unwrap();
    assert_eq!(outcome.log.len(), 2);
    assert!(ck.join("train.log").is_file());

    let store = dir.path().join("ex").join(STORE_FILE);
    let ex = cmd_extract(&cfg, &ck, &store).unwrap();
    assert_eq!(ex.videos, 8);
    assert!(ex.features_per_video.iter().all(|&n| n == 31 * 5));
    assert_eq!(ex.descriptors.iter().filter(|d| d.fusion == Fusion::Concat).count(), 8);
    assert!(store.with_extension("csv").is_file());

    let out = dir.path().join("eval");
    let report = cmd_evaluate(&cfg, &store, &out).unwrap();
    assert_eq!(report.gallery_entries, 4);
    assert_eq!(report.probes, 4);
    assert!(!out.join(LOCK_FILE).exists());

    // Same inputs, fresh directories: byte-identical artifacts.
    let ck2 = dir.path().join("ck2");
    cmd_train(&cfg, &ck2).unwrap();
    for f in ["params.bin", "checkpoint.toml", "train.log"] {
        assert_eq!(read(&ck.join(f)), read(&ck2.join(f)), "{f}");
    }
    let store2 = dir.path().join("ex2").join(STORE_FILE);
    cmd_extract(&cfg, &ck2, &store2).unwrap();
    assert_eq!(read(&store), read(&store2));
    let out2 = dir.path().join("eval2");
    cmd_evaluate(&cfg, &store2, &out2).unwrap();
    for f in [REPORT_FILE, CMC_FILE, ROC_FILE] {
        assert_eq!(read(&out.join(f)), read(&out2.join(f)), "{f}");
    }

    // Truncation: fewer features per video; too long a window skips videos.
    let mut short = cfg.clone();
    short.truncation = Some(6);
    let ex = cmd_extract(&short, &ck, &dir.path().join("ex3").join(STORE_FILE)).unwrap();
    assert!(ex.features_per_video.iter().all(|&n| n == 5 * 5));
    short.truncation = Some(33);
    let ex = cmd_extract(&short, &ck, &dir.path().join("ex4").join(STORE_FILE)).unwrap();
    assert_eq!((ex.videos, ex.skipped), (0, 8));

    // Degenerate transfer reproduces the plain evaluation.
    let tr = dir.path().join("transfer");
    cmd_transfer(&cfg, &cfg, &tr).unwrap();
    for f in [REPORT_FILE, CMC_FILE, ROC_FILE] {
        assert_eq!(read(&out.join(f)), read(&tr.join("report").join(f)), "{f}");
    }
    let mut missing = cfg.clone();
    missing.corpus_root = dir.path().join("nowhere");
    assert_eq!(cmd_transfer(&cfg, &missing, &dir.path().join("t2")).unwrap_err().exit_code(), 3);
}

#[test]
fn silhouette_mode_yields_full_body_descriptors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.mode = InputMode::Silhouette;
    cfg.flow_cache = None;
    cmd_synth(&cfg, false).unwrap();
    let ck = dir.path().join("ck");
    cmd_train(&cfg, &ck).unwrap();
    let store = dir.path().join("ex").join(STORE_FILE);
    let ex = cmd_extract(&cfg, &ck, &store).unwrap();
    assert!(ex.features_per_video.iter().all(|&n| n == 31));
    let width = cfg.network.feature_width();
    for d in load_store(&store).unwrap() {
        assert_eq!(d.vector.len(), width);
    }
    assert_eq!(cfg.effective_parts(), vec![Part::FullBody]);
    cmd_evaluate(&cfg, &store, &dir.path().join("eval")).unwrap();
}

#[test]
fn data_and_config_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.corpus.subjects = 0;
    assert_eq!(cmd_synth(&cfg, false).unwrap_err().exit_code(), 3);

    let cfg = tiny_config(dir.path());
    cmd_synth(&cfg, false).unwrap();
    let mut one = cfg.clone();
    one.split.train_subjects = vec!["s000".into()];
    one.split.eval_subjects = vec!["s002".into(), "s003".into()];
    assert_eq!(cmd_train(&one, &dir.path().join("ck")).unwrap_err().exit_code(), 3);

    let ck = dir.path().join("ck2");
    cmd_train(&cfg, &ck).unwrap();
    let mut vgg = cfg.clone();
    vgg.network = NetworkSpec::tiny_vgg(2, 8);
    let err = cmd_extract(&vgg, &ck, &dir.path().join("ex").join(STORE_FILE)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
