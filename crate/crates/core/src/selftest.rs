//! Deterministic invariant suite run by the `selftest` command.
//!
//! Each check reports a measured value against a limit. Values depend only on the seed
//! and the configuration, so two runs with the same inputs print identical reports.

use serde::Serialize;

use crate::backbone::{
    forward_with_prompts, patch_embed, BackboneConfig, BackboneParams, PromptSet, SeqLenRecorder,
};
use crate::config::RunConfig;
use crate::error::Result;
use crate::freq::{dct2d, dft2d, frequency_filter, idct2d, idft2d, Transform};
use crate::head::HeadConfig;
use crate::memory::{
    external_retrieve, gate, infusion_deltas, internal_enhance, kmeans, Dropout, InternalMemoryParams, MemoryConfig,
};
use crate::model::{Model, ModelConfig, PreparedSample, SampleInput};
use crate::numerics::{gaussian, matmul, seeded_rng, softmax_rows, Rng, Tensor};
use crate::prompter::PrompterConfig;
use crate::train::{bank_from_inputs, bce_weight, compute_metrics, gradcheck_bce, gradcheck_model, weighted_bce};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:<28} {:>12} {:>10}  result\n", "suite", "check", "value", "limit");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<10} {:<28} {:>12.3e} {:>10.1e}  {}\n",
                c.suite,
                c.name,
                c.value,
                c.limit,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!("{} checks, {} failed\n", self.checks.len(), failed));
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    /// Passes when `value < limit`; NaN fails.
    fn below(&mut self, suite: &'static str, name: &'static str, value: f64, limit: f64) {
        self.checks.push(Check {
            suite,
            name,
            value,
            limit,
            passed: value < limit,
        });
    }

    fn exact(&mut self, suite: &'static str, name: &'static str, ok: bool) {
        self.checks.push(Check {
            suite,
            name,
            value: if ok { 0.0 } else { 1.0 },
            limit: 0.5,
            passed: ok,
        });
    }
}

pub fn run(cfg: &RunConfig) -> Result<SelftestReport> {
    let mut s = Suite { checks: Vec::new() };
    let mut rng = seeded_rng(cfg.seed);
    transform_suite(&mut s, &mut rng)?;
    kernel_suite(&mut s, &mut rng)?;
    hopfield_suite(&mut s, &mut rng)?;
    gradient_suite(&mut s, cfg.seed)?;
    metrics_suite(&mut s, &mut rng)?;
    shape_suite(&mut s, cfg, &mut rng)?;
    model_suite(&mut s, cfg.seed)?;
    Ok(SelftestReport {
        seed: cfg.seed,
        checks: s.checks,
    })
}

fn transform_suite(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let (mut rt64, mut rt32, mut pars, mut dft, mut full) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let x: Tensor<f64> = gaussian(&[1, 64, 48], 1.0, rng);
        let c = dct2d(&x)?;
        rt64 = rt64.max(idct2d(&c)?.max_abs_diff(&x));
        pars = pars.max((c.coeffs.sum_sq() - x.sum_sq()).abs() / x.sum_sq());
        let x32: Tensor<f32> = x.cast();
        rt32 = rt32.max(idct2d(&dct2d(&x32)?)?.max_abs_diff(&x32) as f64);
        dft = dft.max(idft2d(&dft2d(&x)?)?.max_abs_diff(&x));
        full = full.max(frequency_filter(&x, 1.0, Transform::Dct)?.max_abs_diff(&x));
    }
    s.below("transform", "dct_roundtrip_f64", rt64, 1e-10);
    s.below("transform", "dct_roundtrip_f32", rt32, 1e-5);
    s.below("transform", "dct_parseval", pars, 1e-9);
    s.below("transform", "dft_roundtrip_f64", dft, 1e-10);
    s.below("transform", "full_band_identity", full, 1e-10);
    Ok(())
}

fn kernel_suite(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let a: Tensor<f64> = gaussian(&[7, 5], 1.0, rng);
    let b: Tensor<f64> = gaussian(&[5, 9], 1.0, rng);
    let naive = Tensor::from_fn(&[7, 9], |idx| {
        let (i, j) = (idx / 9, idx % 9);
        (0..5).map(|k| a.data()[i * 5 + k] * b.data()[k * 9 + j]).sum()
    });
    s.below("kernels", "matmul_vs_naive", matmul(&a, &b)?.max_abs_diff(&naive), 1e-12);

    let x: Tensor<f64> = gaussian(&[6, 11], 3.0, rng);
    let p = softmax_rows(&x, 1.0)?;
    let worst = (0..6).map(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    s.below("kernels", "softmax_rows_sum", worst, 1e-12);

    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let pts: Tensor<f64> = Tensor::from_fn(&[300, 2], |idx| centers[(idx / 2) % 3][idx % 2]);
    let noise: Tensor<f64> = gaussian(&[300, 2], 0.01, rng);
    let pts = pts.add(&noise)?;
    let found = kmeans(&pts, 3, 100, rng)?;
    let err = centers
        .iter()
        .map(|c| {
            (0..3)
                .map(|j| ((found.row(j)[0] - c[0]).powi(2) + (found.row(j)[1] - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    s.below("kernels", "kmeans_blob_recovery", err, 0.1);
    Ok(())
}

fn hopfield_suite(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let d = 16;
    let bank = Tensor::<f64>::identity(d);
    let sharp = external_retrieve(&bank, &bank, 50.0)?.max_abs_diff(&bank);
    s.below("hopfield", "sharp_retrieval", sharp, 1e-9);

    let mut hull = 0.0f64;
    for _ in 0..100 {
        let protos: Tensor<f64> = gaussian(&[5, d], 1.0, rng);
        let q: Tensor<f64> = gaussian(&[3, d], 2.0, rng);
        let m = external_retrieve(&q, &protos, 1.0)?;
        for i in 0..3 {
            for c in 0..d {
                let col = (0..5).map(|r| protos.row(r)[c]);
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                let v = m.row(i)[c];
                hull = hull.max(lo - v).max(v - hi);
            }
        }
    }
    s.below("hopfield", "convex_hull_violation", hull, 1e-9);

    let x: Tensor<f64> = gaussian(&[9, d], 1.0, rng);
    let params = InternalMemoryParams {
        w_lookup: gaussian(&[d, 12], 1.0, rng),
        w_content: Tensor::zeros(&[12, d]),
    };
    s.exact("hopfield", "zero_content_identity", internal_enhance(&x, &params, 0.25, &Dropout::Disabled)? == x);

    let m: Tensor<f64> = gaussian(&[1, d], 1.0, rng);
    let (r1, e1) = infusion_deltas(m.data(), m.data(), 0.2);
    let (r2, e2) = infusion_deltas(m.data(), m.data(), 0.9);
    s.exact("hopfield", "gate_identity", r1 == r2 && e1 == e2 && gate(m.data(), m.data()) == 1.0);

    let mr: Tensor<f64> = gaussian(&[1, d], 1.0, rng);
    let me: Tensor<f64> = gaussian(&[1, d], 1.0, rng);
    let alpha = gate(mr.data(), me.data());
    let (dr, de) = infusion_deltas(mr.data(), me.data(), alpha);
    let cons = (0..d)
        .map(|i| (dr[i] + de[i] - mr.data()[i] - me.data()[i]).abs())
        .fold(0.0, f64::max);
    s.below("hopfield", "infusion_conservation", cons, 1e-12);
    Ok(())
}

fn gradient_suite(s: &mut Suite, seed: u64) -> Result<()> {
    s.below("gradient", "bce_central_difference", gradcheck_bce(seed, 20, 4, 6, 1e-3)?, 1e-6);
    let w = bce_weight(0.5f64, 1.0);
    let (l, _) = weighted_bce(
        &Tensor::new(vec![1, 1], vec![0.0f64])?,
        &Tensor::new(vec![1, 1], vec![1.0])?,
        &Tensor::new(vec![1], vec![0.5])?,
    )?;
    s.below("gradient", "hand_weight", (w - 1.64872).abs(), 1e-5);
    // Direct evaluation: w·ln 2 with w = e^0.5.
    s.below("gradient", "hand_loss", (l - 0.5f64.exp() * 2f64.ln()).abs(), 1e-12);
    Ok(())
}

fn metrics_suite(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let (b, a) = (200, 10);
    let logits: Tensor<f64> = gaussian(&[b, a], 1.0, rng);
    let u: Tensor<f64> = gaussian(&[b, a], 1.0, rng);
    let labels = u.map(|v| if v > 0.3 { 1.0 } else { 0.0 });
    let m = compute_metrics(&logits, &labels, 0.0)?;
    let mut ok = true;
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let mut per_acc = 0.0;
    for j in 0..a {
        let mut correct = 0u64;
        for i in 0..b {
            let (p, y) = (logits.row(i)[j] > 0.0, labels.row(i)[j] == 1.0);
            correct += u64::from(p == y);
            match (p, y) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        let c = &m.per_attribute[j];
        ok &= c.tp + c.tn == correct;
        per_acc += correct as f64 / b as f64;
    }
    ok &= m.ma == per_acc / a as f64;
    ok &= m.acc == (tp + tn) as f64 / (b * a) as f64;
    ok &= m.precision == tp as f64 / (tp + fp) as f64;
    ok &= m.recall == tp as f64 / (tp + fn_) as f64;
    s.exact("metrics", "counting_oracle", ok);
    Ok(())
}

fn shape_suite(s: &mut Suite, cfg: &RunConfig, rng: &mut Rng) -> Result<()> {
    let bb = cfg.model_config(vec!["_".into()]).backbone();
    let params: BackboneParams<f32> = BackboneParams::init(&bb, rng)?;
    let image: Tensor<f32> = gaussian(&[1, 3, bb.image_h, bb.image_w], 1.0, rng);
    let tokens = patch_embed(&image, &bb, &params)?;
    let base = bb.seq_len();

    let prompts = PromptSet {
        data: gaussian(&[1, bb.prompt_count, bb.dim], 1.0, rng),
    };
    let mut rec = SeqLenRecorder::default();
    forward_with_prompts(&tokens, Some(&prompts), &bb, &params, &mut rec)?;
    let ok = rec.lens.len() == bb.depth
        && rec.lens.iter().all(|&(layer, n)| {
            n == if bb.is_injected(layer) { base + bb.prompt_count } else { base }
        });
    s.exact("shape", "injected_sequence_lengths", ok);

    let empty = PromptSet {
        data: Tensor::zeros(&[1, 0, bb.dim]),
    };
    let p0 = BackboneConfig {
        prompt_count: 0,
        ..bb.clone()
    };
    let none = BackboneConfig {
        inject_layers: vec![],
        ..bb.clone()
    };
    let a = forward_with_prompts(&tokens, Some(&empty), &p0, &params, &mut SeqLenRecorder::default())?;
    let b = forward_with_prompts(&tokens, Some(&prompts), &none, &params, &mut SeqLenRecorder::default())?;
    s.exact("shape", "no_prompt_paths_identical", a.data == b.data);
    Ok(())
}

/// Small f64 model for the end-to-end gradient check.
pub fn tiny_model_config(attributes: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_h: 32,
            image_w: 32,
            dim: 16,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
            ..BackboneConfig::default()
        },
        prompter: PrompterConfig {
            prompt_count: 2,
            inject_layers: vec![2, 3],
            stem_channels: 4,
            ..PrompterConfig::default()
        },
        memory: MemoryConfig {
            prototypes: 8,
            kmeans_iters: 20,
            ..MemoryConfig::default()
        },
        head: HeadConfig {
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        attributes: (0..attributes).map(|j| format!("attr{j}")).collect(),
        rgb_frames: 1,
        event_frames: 2,
    }
}

/// Tiny f64 model with a bank, four prepared samples, and labels for gradient checks.
pub fn tiny_gradcheck_setup(seed: u64) -> Result<(Model<f64>, Vec<PreparedSample<f64>>, Tensor<f64>)> {
    let mut model: Model<f64> = Model::new(tiny_model_config(3), seed)?;
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let inputs: Vec<SampleInput<f64>> = (0..4)
        .map(|_| SampleInput {
            rgb: gaussian(&[1, 3, 32, 32], 1.0, &mut rng),
            events: gaussian(&[2, 3, 32, 32], 1.0, &mut rng).map(f64::abs),
        })
        .collect();
    let labels = Tensor::new(vec![4, 3], vec![1., 0., 1., 0., 1., 1., 1., 1., 0., 0., 0., 1.])?;
    let bank = bank_from_inputs(&model, &inputs, &labels, 2, seed)?;
    model.set_bank(bank)?;
    let prepared = inputs.iter().map(|x| model.prepare(x)).collect::<Result<Vec<_>>>()?;
    Ok((model, prepared, labels))
}

fn model_suite(s: &mut Suite, seed: u64) -> Result<()> {
    let (model, prepared, labels) = tiny_gradcheck_setup(seed)?;
    s.below("model", "head_central_difference", gradcheck_model(&model, &prepared, &labels, 1e-4)?, 1e-5);
    Ok(())
}
