use std::collections::BTreeMap;

use sdacd::checkpoint;
use sdacd::data::{synthesize_benchmark, write_dataset, DatasetSpec, Split, SyntheticConfig};
use sdacd::domain::BiTemporalSample;
use sdacd::experiments::run_arm;
use sdacd::feature_adaptation::{BackboneConfig, FusionStrategy};
use sdacd::image_adaptation::{DiscriminatorConfig, GeneratorConfig};
use sdacd::metrics::{evaluate, Aggregation, Summary};
use sdacd::trainer::{self, Group, HookPoint, ModelConfig, ModelState, Phase, TrainConfig, TrainOptions};
use sdacd::Error;

fn tiny(fusion: FusionStrategy) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs: 2,
        fusion,
        model: ModelConfig {
            generator: GeneratorConfig {
                width: 4,
                res_blocks: 1,
                identity_init: true,
            },
            image_discriminator: DiscriminatorConfig { width: 4 },
            backbone: BackboneConfig {
                width: 4,
                discriminator_width: 4,
            },
        },
        ..Default::default()
    }
}

fn scenes(n: usize, seed: u64) -> Vec<BiTemporalSample> {
    synthesize_benchmark(&SyntheticConfig {
        n_samples: n,
        tile_size: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

type Snapshot = BTreeMap<Group, ([u8; 32], [u8; 32])>;

fn snapshot(s: &ModelState) -> Snapshot {
    s.groups()
        .into_iter()
        .map(|g| (g, (s.group_checksum(g).unwrap(), s.optimizer_checksum(g).unwrap())))
        .collect()
}

#[test]
fn phases_touch_only_their_groups() {
    for fusion in [FusionStrategy::Feature, FusionStrategy::Output] {
        let mut state = ModelState::new(&tiny(fusion)).unwrap();
        let data = scenes(4, 1);
        let mut seen = Vec::new();
        for step in 0..10 {
            let batch = &data[(step % 2) * 2..(step % 2) * 2 + 2];
            let mut before: Option<Snapshot> = None;
            state
                .train_step_with_hook(batch, &mut |phase, point, s| match point {
                    HookPoint::Before => before = Some(snapshot(s)),
                    HookPoint::After => {
                        let prev = before.take().expect("before precedes after");
                        let now = snapshot(s);
                        for (g, sums) in &now {
                            if !phase.designated().contains(g) {
                                assert_eq!(&prev[g], sums, "{phase} modified {g}");
                            }
                        }
                        assert!(
                            phase.designated().iter().any(|g| prev[g].0 != now[g].0),
                            "{phase} left its groups unchanged"
                        );
                        if step == 0 {
                            seen.push(phase);
                        }
                    }
                })
                .unwrap();
        }
        assert_eq!(seen, Phase::ALL.to_vec(), "{fusion}");
    }
}

#[test]
fn baseline_runs_only_backbone_phases() {
    let mut state = ModelState::new(&TrainConfig {
        ia_enabled: false,
        fa_enabled: false,
        active_tags: sdacd::domain::TagSet::original_only(),
        ..tiny(FusionStrategy::Feature)
    })
    .unwrap();
    let mut seen = Vec::new();
    state
        .train_step_with_hook(&scenes(2, 3), &mut |p, point, _| {
            if point == HookPoint::After {
                seen.push(p)
            }
        })
        .unwrap();
    assert!(seen.iter().all(|p| matches!(p, Phase::Extractor | Phase::PairHead | Phase::Fusion)));
    assert!(seen.contains(&Phase::PairHead));
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = scenes(4, 2);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let (s, r) = trainer::train(
            &tiny(FusionStrategy::Feature),
            &data,
            &TrainOptions {
                out_dir: dir.path(),
                validation: None,
                config_hash: None,
            },
        )
        .unwrap();
        (snapshot(&s), std::fs::read_to_string(r.log_path).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = scenes(4, 4);
    let cfg = TrainConfig {
        checkpoint_interval: 1,
        ..tiny(FusionStrategy::Feature)
    };
    let full_dir = tempfile::tempdir().unwrap();
    let opts = |dir| TrainOptions {
        out_dir: dir,
        validation: None,
        config_hash: None,
    };
    let (full, report) = trainer::train(&cfg, &data, &opts(full_dir.path())).unwrap();
    assert_eq!(report.checkpoints.len(), 2);

    let resume_dir = tempfile::tempdir().unwrap();
    let (mut state, header) = checkpoint::load(&report.checkpoints[0]).unwrap();
    assert_eq!(header.epoch, 1);
    trainer::continue_training(&mut state, &data, &opts(resume_dir.path())).unwrap();
    assert_eq!(state.step(), full.step());
    assert_eq!(snapshot(&state), snapshot(&full));
}

#[test]
fn artifacts_share_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny(FusionStrategy::Output)
    };
    let (train, test) = (scenes(4, 5), scenes(2, 9));
    let arm = run_arm("x", &cfg, &train, &test, dir.path(), Aggregation::Micro).unwrap();
    assert_eq!(arm.config_hash, cfg.hash());
    let (header, _) = checkpoint::read_header(&arm.checkpoint).unwrap();
    assert_eq!(header.config_hash, arm.config_hash);
    let summary = Summary::read(&dir.path().join("summary.toml")).unwrap();
    assert_eq!(summary.config_hash, arm.config_hash);

    // re-evaluating the stored checkpoint reproduces the row
    let (state, _) = checkpoint::load(&arm.checkpoint).unwrap();
    let again = evaluate(&state.predictor(), &test, cfg.threshold, Aggregation::Micro).unwrap();
    assert_eq!(again.metrics, arm.metrics);
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some(trainer::LOG_HEADER));
    assert_eq!(log.lines().count(), 1 + 2);
}

#[test]
fn loader_rejects_incomplete_triples() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(3, 6);
    write_dataset(&data, dir.path(), Split::Train).unwrap();
    let spec = DatasetSpec {
        tile_size: Some(16),
        ..DatasetSpec::new(dir.path(), Split::Train)
    };
    let loaded = sdacd::data::load_dataset(&spec).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded[0].gt, data[0].gt);

    let victim = dir.path().join("train").join("OUT").join(format!("{}.png", data[1].id));
    std::fs::remove_file(victim).unwrap();
    match sdacd::data::load_dataset(&spec) {
        Err(Error::Ingestion(msg)) => assert!(msg.contains(&data[1].id) && msg.contains("OUT"), "{msg}"),
        other => panic!("expected an ingestion error, got {other:?}"),
    }
}
