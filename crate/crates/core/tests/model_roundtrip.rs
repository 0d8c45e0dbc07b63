//! Whole-model behavior: persistence, bank immutability, transform and precision agreement.

use evprompt::backbone::{NoHook, SeqLenRecorder};
use evprompt::freq::Transform;
use evprompt::model::{Model, ModelConfig, SampleInput};
use evprompt::numerics::{gaussian, seeded_rng, Tensor};
use evprompt::pipeline::{load_checkpoint, save_checkpoint};
use evprompt::selftest::tiny_model_config;
use evprompt::train::bank_from_inputs;

fn inputs(n: usize, seed: u64) -> Vec<SampleInput<f32>> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| SampleInput {
            rgb: gaussian(&[1, 3, 32, 32], 1.0, &mut rng),
            events: gaussian(&[2, 3, 32, 32], 1.0, &mut rng).map(f32::abs),
        })
        .collect()
}

fn model_with_bank(cfg: ModelConfig, seed: u64) -> (Model<f32>, Vec<SampleInput<f32>>) {
    let mut model = Model::new(cfg, seed).unwrap();
    let xs = inputs(6, seed + 100);
    let labels = Tensor::from_fn(&[6, 3], |i| ((i * 7 + 3) % 4 < 2) as u8 as f32);
    let bank = bank_from_inputs(&model, &xs, &labels, 2, seed).unwrap();
    model.set_bank(bank).unwrap();
    (model, xs)
}

#[test]
fn checkpoint_roundtrip_reproduces_logits() {
    let (model, xs) = model_with_bank(tiny_model_config(3), 1);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let back = load_checkpoint(dir.path(), None).unwrap();
    assert_eq!(back.checksum(), model.checksum());
    assert_eq!(back.bank().unwrap().checksum(), model.bank().unwrap().checksum());
    for x in &xs {
        assert_eq!(back.forward(x, &mut NoHook).unwrap(), model.forward(x, &mut NoHook).unwrap());
    }
}

#[test]
fn inference_leaves_the_bank_untouched() {
    let (model, xs) = model_with_bank(tiny_model_config(3), 2);
    let before = model.bank().unwrap().checksum();
    for x in &xs {
        model.forward(x, &mut NoHook).unwrap();
    }
    assert_eq!(model.bank().unwrap().checksum(), before);
}

#[test]
fn full_band_dct_matches_no_transform() {
    let mut dct = tiny_model_config(3);
    dct.prompter.keep_fraction = 1.0;
    dct.prompter.transform = Transform::Dct;
    let mut none = dct.clone();
    none.prompter.transform = Transform::None;
    let (a, xs) = model_with_bank(dct, 3);
    let (b, _) = model_with_bank(none, 3);
    for x in &xs {
        let la = a.forward(x, &mut NoHook).unwrap();
        let lb = b.forward(x, &mut NoHook).unwrap();
        assert!(la.max_abs_diff(&lb) < 1e-4, "{:?} vs {:?}", la.data(), lb.data());
    }
}

#[test]
fn f32_and_f64_forwards_agree() {
    let (model, xs) = model_with_bank(tiny_model_config(3), 4);
    let wide = model.cast::<f64>().unwrap();
    for x in &xs {
        let l32: Tensor<f64> = model.forward(x, &mut NoHook).unwrap().cast();
        let x64 = SampleInput { rgb: x.rgb.cast(), events: x.events.cast() };
        let l64 = wide.forward(&x64, &mut NoHook).unwrap();
        assert!(l32.max_abs_diff(&l64) < 1e-4);
    }
}

#[test]
fn prompts_lengthen_only_injected_layers() {
    let cfg = tiny_model_config(3);
    let (model, xs) = model_with_bank(cfg.clone(), 5);
    let mut rec = SeqLenRecorder::default();
    model.forward(&xs[0], &mut rec).unwrap();
    let base = cfg.backbone().num_patches() + 1;
    assert!(!rec.lens.is_empty());
    for &(layer, len) in &rec.lens {
        let expect = if cfg.prompter.inject_layers.contains(&layer) { base + cfg.prompter.prompt_count } else { base };
        assert_eq!(len, expect, "layer {layer}");
    }
}

#[test]
fn inconsistent_configs_are_rejected() {
    let mut cfg = tiny_model_config(3);
    cfg.backbone.heads = 3;
    assert!(Model::<f32>::new(cfg, 0).is_err());
    let mut cfg = tiny_model_config(3);
    cfg.prompter.inject_layers = vec![4];
    assert!(Model::<f32>::new(cfg, 0).is_err());
    let mut cfg = tiny_model_config(3);
    cfg.attributes.clear();
    assert!(Model::<f32>::new(cfg, 0).is_err());
}
