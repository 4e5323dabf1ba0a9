//! Small end-to-end runs through preprocessing, training, inference and
//! evaluation on phantom data.

use std::fs;
use std::path::Path;

use sala_core::checkpoint::load_checkpoint;
use sala_core::dataio::{assemble_study, load_labels, load_manifest, save_volume, Phase, StudyEntry, View};
use sala_core::inference::{infer_entry, predict_study, Ensemble, InferenceConfig};
use sala_core::metrics::{evaluate_predictions, prediction_path};
use sala_core::network::NetworkConfig;
use sala_core::phantom::{generate_dataset, PhantomParams};
use sala_core::preprocess::{
    load_preprocessed, load_preprocessed_dir, preprocess_study, remap_labels, save_preprocessed, PreprocessConfig,
    PreprocessedStudy,
};
use sala_core::training::{fold_subjects, train_fold, train_fold_observed, TrainConfig};

fn phantom() -> PhantomParams {
    PhantomParams {
        shape: [3, 160, 160],
        la_shape: [160, 160],
        spacing: [12.0, 1.0, 1.0],
        ..PhantomParams::default()
    }
}

const GEOMETRY: PreprocessConfig = PreprocessConfig {
    target_spacing: 5.0,
    target_size: 32,
};

fn dataset(n: usize, dir: &Path) -> (Vec<StudyEntry>, Vec<PreprocessedStudy>) {
    let manifest = generate_dataset(n, 3, dir.join("raw"), &phantom()).unwrap();
    let entries = load_manifest(manifest).unwrap();
    let data = entries
        .iter()
        .map(|e| preprocess_study(&assemble_study(e).unwrap(), &GEOMETRY).unwrap())
        .collect();
    (entries, data)
}

fn tiny_config(out: &Path, folds: usize) -> TrainConfig {
    TrainConfig {
        folds,
        epochs: 1,
        batch_size: 2,
        network: NetworkConfig::with_filters(&[4, 8]),
        preprocess: GEOMETRY,
        output_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_smoke_run_and_inference() {
    let dir = tempfile::tempdir().unwrap();
    let (entries, data) = dataset(2, dir.path());
    let cfg = tiny_config(&dir.path().join("out"), 2);
    let r = train_fold(&cfg, 0, &data).unwrap();
    assert_eq!(r.history.len(), 1);
    assert_eq!(r.selected_epoch, 0);
    let fold_dir = dir.path().join("out/fold_0");
    for f in ["best.ckpt", "last.ckpt", "log.csv"] {
        assert!(fold_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(fold_dir.join("log.csv")).unwrap().lines().count(), 2);
    let (_, meta) = load_checkpoint(&r.checkpoint).unwrap();
    assert_eq!(meta.preprocess, GEOMETRY);

    let ensemble = Ensemble::load(&vec![r.checkpoint.clone(); 5]).unwrap();
    let icfg = InferenceConfig::default();
    let probs = predict_study(&ensemble, &data[0], &icfg).unwrap();
    for phase in Phase::ALL {
        let p = probs.phase(phase);
        assert_eq!(p.sa.shape(), [3, 32, 32]);
        assert_eq!(p.la.shape(), [1, 32, 32]);
        assert!(p.sa.simplex_error() < 1e-6 && p.la.simplex_error() < 1e-6);
    }

    let out = dir.path().join("pred");
    let first = infer_entry(&ensemble, &entries[0], &icfg, &out).unwrap();
    assert_eq!(first.len(), 4);
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();
    let study = assemble_study(&entries[0]).unwrap();
    for phase in Phase::ALL {
        for view in View::ALL {
            let pred = load_labels(prediction_path(&out, &entries[0].subject_id, view, phase)).unwrap();
            let image = study.phase(phase).image(view);
            assert_eq!(pred.shape(), image.shape());
            assert_eq!(pred.spacing(), image.spacing());
            assert!(pred.data().iter().all(|&v| v <= 2));
        }
    }
    let again = infer_entry(&ensemble, &entries[0], &icfg, &out).unwrap();
    let bytes_again: Vec<Vec<u8>> = again.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(bytes, bytes_again);
}

#[test]
fn validation_subjects_never_reach_training_batches() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(5, dir.path());
    let cfg = tiny_config(&dir.path().join("out"), 5);
    for fold in [0, 3] {
        let (_, val) = fold_subjects(&data, cfg.folds, cfg.seed, fold).unwrap();
        let mut seen = Vec::new();
        train_fold_observed(&cfg, fold, &data, |batch| seen.extend(batch.iter().map(|s| s.subject))).unwrap();
        assert_eq!(seen.len(), 4 * 2 * 3);
        assert!(seen.iter().all(|s| !val.contains(s)));
    }
}

#[test]
fn training_rejects_mismatched_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(2, dir.path());
    let mut cfg = tiny_config(&dir.path().join("out"), 2);
    cfg.preprocess.target_size = 64;
    assert!(train_fold(&cfg, 0, &data).unwrap_err().is_validation());
    let cfg = tiny_config(&dir.path().join("out"), 2);
    assert!(train_fold(&cfg, 2, &data).unwrap_err().is_validation());
}

#[test]
fn cache_round_trip_is_exact_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(2, dir.path());
    let cache = dir.path().join("cache");
    let sub = save_preprocessed(&data[0], &cache).unwrap();
    save_preprocessed(&data[1], &cache).unwrap();
    assert_eq!(load_preprocessed(&sub).unwrap(), data[0]);
    assert_eq!(load_preprocessed_dir(&cache).unwrap(), data);
    let mut names: Vec<_> = fs::read_dir(&sub).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let before: Vec<Vec<u8>> = names.iter().map(|p| fs::read(p).unwrap()).collect();
    save_preprocessed(&data[0], &cache).unwrap();
    let after: Vec<Vec<u8>> = names.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
    assert!(names.iter().any(|p| p.to_string_lossy().ends_with("_geometry.json")));
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let (entries, _) = dataset(2, dir.path());
    let pred = dir.path().join("pred");
    for e in &entries {
        let labels = e.labels.as_ref().unwrap();
        for phase in Phase::ALL {
            for view in View::ALL {
                let gt = remap_labels(&load_labels(labels.get(view, phase)).unwrap()).unwrap();
                save_volume(&gt, prediction_path(&pred, &e.subject_id, view, phase)).unwrap();
            }
        }
    }
    let records = evaluate_predictions(&pred, &entries).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        for view in View::ALL {
            assert_eq!(r.view(view).dsc(), 1.0);
            assert_eq!(r.view(view).hd95(), 0.0);
        }
    }
}
