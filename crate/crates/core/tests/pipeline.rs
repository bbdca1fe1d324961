use proptest::prelude::*;
use vpseg_core::checkpoint::{load_model, save_model};
use vpseg_core::config::RunConfig;
use vpseg_core::io::{read_clip_dir, write_clip_dir};
use vpseg_core::model::Model;
use vpseg_core::stream::{infer_stream, StreamOptions, StreamSession};
use vpseg_core::synth::gen_stream;
use vpseg_core::train::train;
use vpseg_core::Tensor;

fn tiny() -> RunConfig {
    RunConfig {
        base_channels: 4,
        num_heads: 2,
        train_clips: 2,
        max_steps: Some(3),
        ..RunConfig::desk_scale()
    }
}

fn stream(cfg: &RunConfig, seed: u64, n: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    gen_stream(&cfg.synth_config(seed), n).unwrap().unzip()
}

#[test]
fn trained_checkpoint_round_trips_through_disk_and_streams() {
    let cfg = tiny();
    let model = train(&cfg, &mut std::io::sink()).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.config, model.config);

    let (frames, masks) = stream(&cfg, 9, 7);
    let clip_dir = dir.path().join("clip");
    write_clip_dir(&clip_dir, &frames, &masks, &serde_json::json!({ "seed": 9 })).unwrap();
    let files = read_clip_dir(&clip_dir).unwrap();
    assert_eq!(files.frames.len(), 7);

    let a = infer_stream(&loaded, &files.frames, cfg.stream_options()).unwrap();
    let b = infer_stream(&load_model(&path).unwrap(), &files.frames, cfg.stream_options()).unwrap();
    assert_eq!(a.len(), 7);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.prob, y.prob);
        assert_eq!((x.sem_frame, x.conf_frame), (y.sem_frame, y.conf_frame));
    }
}

#[test]
fn single_source_keeps_one_slot_feeding_both_positions() {
    let cfg = tiny();
    let model = Model::init(cfg.model_config(), 1).unwrap();
    let (frames, _) = stream(&cfg, 3, 6);
    let single = infer_stream(
        &model,
        &frames,
        StreamOptions {
            single_source: true,
            ..cfg.stream_options()
        },
    )
    .unwrap();
    assert_eq!(single.len(), 6);
    assert!(single.iter().all(|r| r.prob.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn slots_never_point_at_unseen_frames(seed in 0u64..1000, n in 1usize..9, sem in 1usize..5, conf in 1usize..3) {
        let cfg = RunConfig { semantic_cooldown: sem, confidence_cooldown: conf, ..tiny() };
        let model = Model::init(cfg.model_config(), seed).unwrap();
        let (frames, _) = stream(&cfg, seed, n);
        let mut session = StreamSession::new(&model, cfg.stream_options()).unwrap();
        for (t, f) in frames.iter().enumerate() {
            let r = session.push(f).unwrap();
            prop_assert_eq!(r.t, t);
            // slots only hold frames already predicted before t
            prop_assert!(r.sem_frame <= t.saturating_sub(1) || t == 0);
            prop_assert!(r.conf_frame <= t.saturating_sub(1) || t == 0);
            prop_assert!(r.prob.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        prop_assert_eq!(session.frames_seen(), n);
    }
}
