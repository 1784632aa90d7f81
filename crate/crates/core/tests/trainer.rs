use std::path::Path;

use tridistill_core::cache::{build_cache, Refinement, SampleCache};
use tridistill_core::discriminator::DiscriminatorConfig;
use tridistill_core::field::DecoderConfig;
use tridistill_core::generator::{GeneratorConfig, GROUP_UPSAMPLER3D};
use tridistill_core::perceptual::RandomPyramid;
use tridistill_core::prior::{ConditionSpec, CorruptionConfig, OracleSampler};
use tridistill_core::prune::{PruneThresholds, RandomProjectionEmbedder};
use tridistill_core::render::RenderConfig;
use tridistill_core::trainer::{
    load_checkpoint, probe_consistency, read_metrics, resume_state, save_checkpoint, train_stage1, train_stage2, MetricsRecord,
    RunDir, Stage2Config, TrainConfig, TrainState,
};
use tridistill_core::Error;

fn tiny(stage: u8, iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::reference(stage);
    cfg.iterations = iterations;
    cfg.batch_size = 2;
    cfg.checkpoint_interval = 2;
    cfg.log_interval = 1;
    cfg.ada.interval = 1;
    cfg.image_resolution = 16;
    cfg.generator = GeneratorConfig {
        z_dim: 8,
        w_dim: 8,
        mapping_layers: 2,
        base_resolution: 8,
        triplane_channels: 4,
        synthesis_channels: 8,
        upsampler2d_channels: 4,
        upsampler2d_factor: 2,
        upsampler3d_channels: 4,
        decoder: DecoderConfig { features: 4, hidden: vec![8] },
        ..GeneratorConfig::default()
    };
    cfg.render = RenderConfig {
        n_coarse: 6,
        n_fine: 6,
        raw_resolution: 8,
        ..RenderConfig::default()
    };
    cfg.discriminator = DiscriminatorConfig {
        base_channels: 4,
        max_channels: 8,
        hidden: 8,
        pose_embedding: Some(8),
        ..DiscriminatorConfig::main(16)
    };
    cfg.patch_discriminator = DiscriminatorConfig {
        resolution: 8,
        base_channels: 4,
        max_channels: 8,
        hidden: 8,
        pose_embedding: None,
    };
    cfg.stage2.patch_size = 8;
    cfg.stage2.probe_latents = 2;
    cfg
}

fn cache(dir: &Path, n: usize) -> SampleCache {
    let sampler = OracleSampler::new(ConditionSpec::oracle(1, 75.0, 16).unwrap(), CorruptionConfig::default()).unwrap();
    build_cache(
        &sampler,
        &RandomProjectionEmbedder::default(),
        n,
        &PruneThresholds::permissive(16),
        &Refinement::default(),
        dir,
        3,
        1,
    )
    .unwrap()
}

fn quiet() -> impl FnMut(&MetricsRecord) {
    |_: &MetricsRecord| {}
}

#[test]
fn zero_iterations_returns_the_initial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cache(tmp.path(), 20);
    let cfg = tiny(1, 0);
    let st = train_stage1(&cfg, &c, None, None, &mut quiet()).unwrap();
    let init = TrainState::initial(&cfg).unwrap();
    assert_eq!(st.iteration, 0);
    assert_eq!(st.generator.params.values, init.generator.params.values);
    assert_eq!(st.discriminator.params.values, init.discriminator.params.values);
    assert!(st.records.is_empty());
}

#[test]
fn stage1_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cache(&tmp.path().join("cache"), 20);
    let cfg = tiny(1, 4);
    let run_a = RunDir::create(&tmp.path().join("a")).unwrap();
    let a = train_stage1(&cfg, &c, None, Some(&run_a), &mut quiet()).unwrap();
    let b = train_stage1(&cfg, &c, None, None, &mut quiet()).unwrap();
    assert_eq!(a.generator.params.values, b.generator.params.values);
    assert_eq!(a.records, b.records);
    assert_eq!(a.records.len(), 4);
    assert_ne!(a.generator.params.values, TrainState::initial(&cfg).unwrap().generator.params.values);
    for w in a.records.windows(2) {
        assert!(w[0].iteration < w[1].iteration);
    }
    for r in &a.records {
        assert!(r.r1.unwrap() >= 0.0);
        assert!((0.0..=1.0).contains(&r.d_accuracy.unwrap()));
    }
    assert_eq!(read_metrics(&run_a.metrics_path(1)).unwrap(), a.records);
    assert!(run_a.sample_path(1, 2).exists() && run_a.sample_path(1, 4).exists());

    // Resume a copy of the run from its iteration-2 checkpoint.
    let (_, mid) = load_checkpoint(&run_a.checkpoint_path(1, 2)).unwrap();
    assert_eq!(mid.iteration, 2);
    let run_c = RunDir::create(&tmp.path().join("c")).unwrap();
    let c_state = train_stage1(&cfg, &c, Some(mid), Some(&run_c), &mut quiet()).unwrap();
    assert_eq!(c_state.generator.params.values, a.generator.params.values);
    assert_eq!(c_state.discriminator.params.values, a.discriminator.params.values);
    assert_eq!(c_state.opt_generator, a.opt_generator);
    assert_eq!(c_state.ada, a.ada);
    assert_eq!(read_metrics(&run_c.metrics_path(1)).unwrap(), a.records);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cache(&tmp.path().join("cache"), 20);
    let cfg = tiny(1, 1);
    let st = train_stage1(&cfg, &c, None, None, &mut quiet()).unwrap();
    let path = tmp.path().join("ck.json");
    save_checkpoint(&path, &cfg, &st).unwrap();
    let (cfg2, back) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(back.generator.params.values, st.generator.params.values);
    assert_eq!(back.generator.decoder.params.values, st.generator.decoder.params.values);
    assert_eq!(back.opt_discriminator, st.opt_discriminator);
    assert_eq!(back.records, st.records);
    assert_eq!(back.iteration, 1);

    // A flipped byte in the blob is detected.
    let bin = path.with_extension("bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[5] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn resume_refuses_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cache(&tmp.path().join("cache"), 20);
    let cfg = tiny(1, 2);
    let run = RunDir::create(&tmp.path().join("run")).unwrap();
    train_stage1(&cfg, &c, None, Some(&run), &mut quiet()).unwrap();
    assert_eq!(resume_state(&run, &cfg, false).unwrap().unwrap().iteration, 2);
    let changed = TrainConfig { lr_g: 0.001, ..cfg.clone() };
    assert!(matches!(resume_state(&run, &changed, false), Err(Error::Config(_))));
    assert!(resume_state(&run, &changed, true).unwrap().is_some());
    let reshaped = TrainConfig {
        seed: 9,
        discriminator: DiscriminatorConfig { hidden: 4, ..cfg.discriminator.clone() },
        ..cfg.clone()
    };
    assert!(resume_state(&run, &reshaped, true).is_err());
}

#[test]
fn non_finite_loss_aborts_with_the_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cache(&tmp.path().join("cache"), 20);
    let cfg = tiny(1, 3);
    let mut st = TrainState::initial(&cfg).unwrap();
    st.discriminator.params.values[0] = f64::NAN;
    let run = RunDir::create(&tmp.path().join("run")).unwrap();
    let err = train_stage1(&cfg, &c, Some(st), Some(&run), &mut quiet()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { iteration: 1, .. }), "{err}");
    assert!(run.checkpoint_path(1, 0).exists());
}

#[test]
fn bad_inputs_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let small = cache(tmp.path(), 12);
    assert!(matches!(
        train_stage1(&tiny(1, 1), &small, None, None, &mut quiet()),
        Err(Error::Config(_))
    ));
    let mut cfg = tiny(1, 1);
    cfg.image_resolution = 32;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let json = serde_json::to_string(&tiny(1, 1)).unwrap().replacen('{', "{\"bogus\": 1,", 1);
    assert!(TrainConfig::from_json(&json).is_err());
    let mut cfg = tiny(1, 1);
    cfg.stage2.trainable.push("everything".into());
    assert!(cfg.validate().is_err());
    assert!(matches!(
        train_stage2(&tiny(2, 1), &TrainState::initial(&tiny(2, 1)).unwrap(), &small, None, None, &mut quiet()),
        Err(Error::Config(_))
    ));
}

#[test]
fn stage2_trains_only_the_volumetric_path_with_ada_off() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cache(&tmp.path().join("cache"), 20);
    let s1 = train_stage1(&tiny(1, 2), &c, None, None, &mut quiet()).unwrap();
    assert!(s1.ada.p > 0.0 || s1.records.iter().all(|r| r.ada_p == 0.0));
    let mut cfg = tiny(2, 3);
    cfg.stage2.trainable = Stage2Config::default().trainable;
    let run = RunDir::create(&tmp.path().join("run")).unwrap();
    let s2 = train_stage2(&cfg, &s1, &c, None, Some(&run), &mut quiet()).unwrap();
    assert_eq!(s2.stage, 2);
    assert!(s2.records.iter().all(|r| r.ada_p == 0.0));
    assert_eq!(s2.records[0].iteration, 0);
    let baseline = probe_consistency(&cfg, &s1.generator, &c, &RandomPyramid::default()).unwrap();
    assert_eq!(s2.probe_baseline, Some(baseline));
    assert!(baseline > 0.0);
    assert_eq!(s2.discriminator.params.values, s1.discriminator.params.values);
    let mask = s1.generator.group_mask(&[GROUP_UPSAMPLER3D]);
    let (before, after) = (&s1.generator.params.values, &s2.generator.params.values);
    let mut moved = 0;
    for i in 0..before.len() {
        if mask[i] {
            moved += usize::from(before[i] != after[i]);
        } else {
            assert_eq!(before[i], after[i], "frozen parameter {i} moved");
        }
    }
    assert!(moved > 0);
    assert_ne!(s1.generator.decoder.params.values, s2.generator.decoder.params.values);

    // Resuming stage 2 from its first checkpoint replays the run.
    let (_, mid) = load_checkpoint(&run.checkpoint_path(2, 2)).unwrap();
    let again = train_stage2(&cfg, &s1, &c, Some(mid), None, &mut quiet()).unwrap();
    assert_eq!(again.generator.params.values, s2.generator.params.values);
    assert_eq!(again.records, s2.records);
}

#[test]
fn reference_stage2_keeps_the_shared_decoder_fixed() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cache(&tmp.path().join("cache"), 20);
    let s1 = train_stage1(&tiny(1, 1), &c, None, None, &mut quiet()).unwrap();
    let cfg = tiny(2, 2);
    assert_eq!(cfg.stage2.trainable, vec![GROUP_UPSAMPLER3D.to_string()]);
    let s2 = train_stage2(&cfg, &s1, &c, None, None, &mut quiet()).unwrap();
    assert_eq!(s1.generator.decoder.params.values, s2.generator.decoder.params.values);
    assert_ne!(s1.generator.params.values, s2.generator.params.values);
}
