use proptest::prelude::*;
use textalign::cache::{self, load_cache, load_cache_with_dim, save_cache, EmbeddingCache};
use textalign::checkpoint::{self, load_checkpoint, save_checkpoint, Checkpoint};
use textalign::config::{ExperimentConfig, Overrides};
use textalign::dataset::{load_split, save_split, TRAIN_SPLIT};
use textalign::LabError;
use textalign_core::backbone::BackboneConfig;
use textalign_core::data::{generate_shapes, DatasetSpec};
use textalign_core::rng::Rng;
use textalign_core::schedule::ScheduleKind;
use textalign_core::text_targets::{RawEmbeddingSet, WhitenedTargetSet};
use textalign_core::trainer::{Model, TrainConfig};

fn raw_set(rng: &mut Rng, n: usize, d: usize) -> RawEmbeddingSet {
    let mut raw = RawEmbeddingSet::new(d);
    for i in 0..n {
        let row = (0..d).map(|_| rng.normal() as f32 as f64).collect();
        raw.insert(format!("sample-{i}"), row).unwrap();
    }
    raw
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raw_cache_round_trip(seed in any::<u64>(), n in 0usize..20, d in 1usize..12) {
        let raw = raw_set(&mut Rng::new(seed), n, d);
        let bytes = cache::encode(&EmbeddingCache::Raw(raw.clone())).unwrap();
        prop_assert_eq!(bytes.len(), 21 + n * 4 * d + raw.ids().iter().map(|s| 2 + s.len()).sum::<usize>());
        match cache::decode(&bytes).unwrap() {
            EmbeddingCache::Raw(back) => prop_assert_eq!(back, raw),
            EmbeddingCache::Whitened(_) => prop_assert!(false, "kind changed"),
        }
    }

    #[test]
    fn whitened_cache_round_trip(seed in any::<u64>(), d in 1usize..6) {
        let raw = raw_set(&mut Rng::new(seed), 3 * d + 3, d);
        let w = WhitenedTargetSet::fit(&raw, 1e-6).unwrap();
        let bytes = cache::encode(&EmbeddingCache::Whitened(w.clone())).unwrap();
        let EmbeddingCache::Whitened(back) = cache::decode(&bytes).unwrap() else {
            panic!("kind changed");
        };
        prop_assert_eq!(&back.stats.mean, &w.stats.mean);
        prop_assert_eq!(back.stats.inv_sqrt_cov.data(), w.stats.inv_sqrt_cov.data());
        for (id, row) in w.targets.iter() {
            let stored = back.get(id).unwrap();
            for (a, b) in row.iter().zip(stored) {
                prop_assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn truncation_is_reported(seed in any::<u64>(), cut in 1usize..40) {
        let raw = raw_set(&mut Rng::new(seed), 3, 4);
        let bytes = cache::encode(&EmbeddingCache::Raw(raw)).unwrap();
        let cut = cut.min(bytes.len());
        let err = cache::decode(&bytes[..bytes.len() - cut]).unwrap_err();
        prop_assert!(matches!(err, LabError::Truncated(_)), "{err:?}");
    }
}

#[test]
fn zero_sample_cache_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ttec");
    save_cache(&EmbeddingCache::Raw(RawEmbeddingSet::new(7)), &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 21);
    let back = load_cache(&path).unwrap();
    assert_eq!(back.dim(), 7);
    assert!(back.rows().is_empty());
}

#[test]
fn cache_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ttec");
    let raw = raw_set(&mut Rng::new(1), 2, 4);
    save_cache(&EmbeddingCache::Raw(raw), &path).unwrap();
    assert!(matches!(
        load_cache_with_dim(&path, 8),
        Err(LabError::DimMismatch { expected: 8, found: 4 })
    ));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 9;
    assert!(matches!(cache::decode(&bytes), Err(LabError::UnknownKind(9))));
    bytes[4] = 2;
    assert!(matches!(cache::decode(&bytes), Err(LabError::UnsupportedVersion { version: 2, .. })));
    bytes[0] = b'X';
    assert!(matches!(cache::decode(&bytes), Err(LabError::BadMagic { .. })));
    assert!(matches!(load_cache(dir.path().join("missing.ttec")), Err(LabError::Io { .. })));
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        depth: 1,
        width: 8,
        heads: 2,
        mlp_ratio: 2.0,
        channels: 3,
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ttck");
    let model = Model::<f32>::init(&small_backbone(), 5, 16, 3).unwrap();
    let cfg = TrainConfig::new(0.5, 4);
    save_checkpoint(&Checkpoint::new(model.clone(), Some(cfg.clone()), Some(3)), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.meta.train_config, Some(cfg));
    assert_eq!(back.meta.epoch, Some(3));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"TTCK");
    assert!(matches!(checkpoint::decode(&bytes[..bytes.len() - 3]), Err(LabError::Truncated(_))));
}

#[test]
fn dataset_split_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_shapes(&DatasetSpec {
        n_samples: 30,
        image_size: 8,
        n_colors: 2,
        n_shapes: 3,
        pixel_noise_std: 0.1,
        seed: 9,
    })
    .unwrap();
    save_split(dir.path(), TRAIN_SPLIT, &data).unwrap();
    assert_eq!(load_split(dir.path(), TRAIN_SPLIT).unwrap(), data);
    let img = dir.path().join("train.f32");
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_split(dir.path(), TRAIN_SPLIT), Err(LabError::Truncated(_))));
}

#[test]
fn config_paths_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    std::fs::write(
        &path,
        r#"{"schedule":{"kind":"const","peak":0.5,"total_epochs":10},"epochs":10,"seed":1,
            "data_dir":"data","targets":"data/t.ttec"}"#,
    )
    .unwrap();
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.data_dir, dir.path().join("data"));
    assert_eq!(cfg.targets, Some(dir.path().join("data/t.ttec")));
    assert_eq!(cfg.train.batch_size, 64);
    assert!(cfg.train.adaptive);
    cfg.apply(&Overrides {
        lambda: Some(0.3),
        schedule: Some(ScheduleKind::Jump),
        jump_epoch: Some(2),
        ramp: Some(4),
        epochs: Some(8),
        adaptive: Some(false),
        ..Overrides::default()
    });
    assert_eq!(cfg.train.schedule.peak, 0.3);
    assert_eq!(cfg.train.schedule.total_epochs, 8);
    assert_eq!(cfg.train.epochs, 8);
    assert!(!cfg.train.adaptive);
    cfg.train.validate().unwrap();
    assert!(matches!(cfg.validate(), Err(LabError::Invalid(_))));

    let saved = dir.path().join("echo.json");
    cfg.save(&saved).unwrap();
    assert_eq!(ExperimentConfig::load(&saved).unwrap(), cfg);
}
