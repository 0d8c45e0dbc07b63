//! Run configuration serialization.

use evprompt::config::RunConfig;
use evprompt::freq::Transform;
use evprompt::memory::Modalities;
use proptest::prelude::*;

proptest! {
    #[test]
    fn valid_configs_roundtrip(
        seed in any::<u64>(),
        keep in 0.01f64..=1.0,
        transform in prop::sample::select(vec![Transform::Dct, Transform::Dft, Transform::None]),
        modalities in prop::sample::select(vec![Modalities::Both, Modalities::Rgb, Modalities::Event, Modalities::None]),
        layers in prop::sample::subsequence(vec![1usize, 2, 3, 4], 0..=4),
        k in 1usize..32,
        lr in 0.0f64..2.0,
        steps in 0usize..500,
        rgb_frames in 1usize..6,
    ) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.backbone.depth = 4;
        cfg.prompter.keep_fraction = keep;
        cfg.prompter.transform = transform;
        cfg.prompter.inject_layers = layers;
        cfg.memory.k = k;
        cfg.memory.modalities = modalities;
        cfg.train.lr = lr;
        cfg.train.steps = steps;
        cfg.input.rgb_frames = rgb_frames;
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json(), cfg.to_json());
    }
}

#[test]
fn partial_json_fills_defaults() {
    let cfg = RunConfig::from_json(r#"{"seed": 9, "memory": {"k": 3}}"#).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.memory.k, 3);
    assert_eq!(cfg.backbone, RunConfig::default().backbone);
}

#[test]
fn invalid_values_are_rejected() {
    for text in [
        r#"{"prompter": {"keep_fraction": 0.0}}"#,
        r#"{"prompter": {"transform": "wavelet"}}"#,
        r#"{"train": {"lr": -0.5}}"#,
        r#"{"memory": {"k": 0}}"#,
        r#"{"backbone": {"nope": 1}}"#,
        "not json",
    ] {
        assert!(RunConfig::from_json(text).is_err(), "{text}");
    }
}
