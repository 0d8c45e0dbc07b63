//! Acceptance criteria, one test per criterion. Each test prints a single
//! `[PASS]`/`[FAIL]` line to stderr (uncaptured) and then asserts.
//!
//! Tests share one lock so the timed criteria are not measured under contention.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use evprompt::backbone::{forward_with_prompts, patch_embed, BackboneParams, PromptSet, SeqLenRecorder};
use evprompt::events::{voxel_counts, voxelize, Event, EventStream};
use evprompt::freq::{dct2d, dft2d, idct2d, idft2d, SpectralMap};
use evprompt::memory::{
    external_retrieve, gate, gated_infusion, infusion_deltas, internal_enhance, kmeans, Dropout,
    InternalMemoryParams, MemoryBank, Modalities,
};
use evprompt::model::{Model, SampleInput};
use evprompt::numerics::{conv2d, gaussian, matmul, seeded_rng, softmax_rows, Rng, Tensor};
use evprompt::train::{attribute_ratios, bce_weight, compute_metrics, weighted_bce, weighted_bce_grad};
use evprompt::config::RunConfig;
use rand::Rng as _;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct Criterion {
    id: u32,
    name: &'static str,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    fn new(id: u32, name: &'static str) -> Self {
        Criterion {
            id,
            name,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(self) {
        let ok = self.failures.is_empty();
        let detail = if ok {
            self.notes.join("; ")
        } else {
            format!("failed: {} | passed: {}", self.failures.join("; "), self.notes.join("; "))
        };
        let line = format!(
            "[{}] criterion {}: {}: {}\n",
            if ok { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            detail
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(ok, "criterion {} failed: {}", self.id, self.failures.join("; "));
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn randn(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    gaussian(dims, 1.0, rng)
}

// Direct-sum orthonormal DCT-II of one h×w plane.
fn naive_dct(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let s = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x[i * w + j]
                        * ((PI * (2 * i + 1) as f64 * u as f64) / (2 * h) as f64).cos()
                        * ((PI * (2 * j + 1) as f64 * v as f64) / (2 * w) as f64).cos();
                }
            }
            out[u * w + v] = s(u, h) * s(v, w) * acc;
        }
    }
    out
}

// Direct-sum unitary DFT of one h×w plane, as (re, im).
fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let ang = -2.0 * PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                    re += x[i * w + j] * ang.cos();
                    im += x[i * w + j] * ang.sin();
                }
            }
            out[u * w + v] = (re * norm, im * norm);
        }
    }
    out
}

#[test]
fn criterion_1_transform_suite() {
    let _g = serial();
    let mut c = Criterion::new(1, "transform suite");
    let start = Instant::now();
    let mut rng = seeded_rng(101);
    let (mut rt64, mut rt32, mut pars, mut drt64, mut drt32, mut dpars) = (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for _ in 0..50 {
        let x = randn(&[1, 64, 48], &mut rng);
        let energy = x.sum_sq();
        let s = dct2d(&x).unwrap();
        rt64 = rt64.max(idct2d(&s).unwrap().max_abs_diff(&x));
        pars = pars.max((s.coeffs.sum_sq() - energy).abs());
        let x32: Tensor<f32> = x.cast();
        rt32 = rt32.max(idct2d(&dct2d(&x32).unwrap()).unwrap().max_abs_diff(&x32) as f64);

        let f = dft2d(&x).unwrap();
        drt64 = drt64.max(idft2d(&f).unwrap().max_abs_diff(&x));
        let fe: f64 = f.data.iter().map(|z| z.norm_sqr()).sum();
        dpars = dpars.max((fe - energy).abs());
        drt32 = drt32.max(idft2d(&dft2d(&x32).unwrap()).unwrap().max_abs_diff(&x32) as f64);
    }
    let elapsed = start.elapsed().as_secs_f64();
    c.check(rt64 < 1e-10, format!("DCT roundtrip f64 {rt64:.2e} < 1e-10"));
    c.check(rt32 < 1e-5, format!("DCT roundtrip f32 {rt32:.2e} < 1e-5"));
    c.check(pars < 1e-9, format!("DCT Parseval {pars:.2e} < 1e-9"));
    c.check(drt64 < 1e-10, format!("DFT roundtrip f64 {drt64:.2e} < 1e-10"));
    c.check(drt32 < 1e-5, format!("DFT roundtrip f32 {drt32:.2e} < 1e-5"));
    c.check(dpars < 1e-9, format!("DFT Parseval {dpars:.2e} < 1e-9"));
    c.check(elapsed < 10.0, format!("runtime {elapsed:.2}s < 10s"));

    // Direct-sum oracles on small maps.
    let x = randn(&[2, 8, 6], &mut rng);
    let s = dct2d(&x).unwrap();
    let f = dft2d(&x).unwrap();
    let (mut dct_err, mut dft_err) = (0f64, 0f64);
    for ch in 0..2 {
        let plane = &x.data()[ch * 48..(ch + 1) * 48];
        dct_err = dct_err.max(max_abs(&s.coeffs.data()[ch * 48..(ch + 1) * 48], &naive_dct(plane, 8, 6)));
        for (z, (re, im)) in f.data[ch * 48..(ch + 1) * 48].iter().zip(naive_dft(plane, 8, 6)) {
            dft_err = dft_err.max((z.re - re).abs()).max((z.im - im).abs());
        }
    }
    c.check(dct_err < 1e-12, format!("DCT vs direct sum {dct_err:.2e}"));
    c.check(dft_err < 1e-12, format!("DFT vs direct sum {dft_err:.2e}"));
    let back = idct2d(&SpectralMap { coeffs: s.coeffs.clone() }).unwrap();
    c.check(back.max_abs_diff(&x) < 1e-12, "small-map inverse");
    c.finish();
}

fn gram_schmidt(v: &Tensor<f64>) -> Tensor<f64> {
    let [n, d] = *v.dims() else { panic!() };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut r = v.row(i).to_vec();
        for q in &rows {
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        r.iter_mut().for_each(|a| *a /= norm);
        rows.push(r);
    }
    Tensor::new(vec![n, d], rows.concat()).unwrap()
}

#[test]
fn criterion_2_hopfield_suite() {
    let _g = serial();
    let mut c = Criterion::new(2, "hopfield suite");
    let mut rng = seeded_rng(202);
    let d = 16;

    let bank = gram_schmidt(&randn(&[8, d], &mut rng));
    let sharp = external_retrieve(&bank, &bank, 50.0).unwrap().max_abs_diff(&bank);
    c.check(sharp < 1e-9, format!("sharp retrieval {sharp:.2e} < 1e-9"));

    let mut hull = 0f64;
    for _ in 0..100 {
        let rows = rng.random_range(1..12);
        let protos = randn(&[rows, d], &mut rng);
        let q = gaussian(&[4, d], 3.0, &mut rng);
        let beta = rng.random_range(0.01..5.0);
        let m = external_retrieve(&q, &protos, beta).unwrap();
        for i in 0..4 {
            for col in 0..d {
                let (lo, hi) = (0..rows)
                    .map(|r| protos.row(r)[col])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                let v = m.row(i)[col];
                hull = hull.max(lo - v).max(v - hi);
            }
        }
    }
    c.check(hull <= 1e-9, format!("convex hull violation {hull:.2e} over 100 banks"));

    let x = randn(&[10, d], &mut rng);
    let params = InternalMemoryParams {
        w_lookup: randn(&[d, 20], &mut rng),
        w_content: Tensor::zeros(&[20, d]),
    };
    let same = internal_enhance(&x, &params, 0.25, &Dropout::Disabled).unwrap() == x;
    c.check(same, "zero-content identity exact");

    // Gate identity: equal memories make the infusion independent of alpha.
    let xr = randn(&[2, 5, d], &mut rng);
    let xe = randn(&[2, 3, d], &mut rng);
    let m = randn(&[2, d], &mut rng);
    let (r, e, _) = gated_infusion(&xr, &xe, &m, &m).unwrap();
    let mut gate_ok = true;
    for alpha in [0.0, 0.3, 0.77, 1.0] {
        for b in 0..2 {
            let (dr, de) = infusion_deltas(m.row(b), m.row(b), alpha);
            gate_ok &= dr == m.row(b) && de == m.row(b);
        }
    }
    let plus_m = |x: &Tensor<f64>, n: usize| {
        Tensor::from_fn(x.dims(), |i| x.data()[i] + m.data()[(i / (n * d)) * d + i % d])
    };
    gate_ok &= r == plus_m(&xr, 5) && e == plus_m(&xe, 3);
    c.check(gate_ok, "gate identity exact");

    // Conservation, bit-exact where every operation is representable: ±1 memories over a
    // power-of-two dimension give a dyadic gate, and integer token states add exactly.
    let mut cons_exact = true;
    for _ in 0..50 {
        let sign = |rng: &mut Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mr = Tensor::from_fn(&[1, d], |_| sign(&mut rng));
        let me = Tensor::from_fn(&[1, d], |_| sign(&mut rng));
        let xr = Tensor::from_fn(&[1, 4, d], |_| rng.random_range(-8..8) as f64);
        let xe = Tensor::from_fn(&[1, 2, d], |_| rng.random_range(-8..8) as f64);
        let (r, e, _) = gated_infusion(&xr, &xe, &mr, &me).unwrap();
        for tr in 0..4 {
            for te in 0..2 {
                for k in 0..d {
                    let lhs = (r.data()[tr * d + k] - xr.data()[tr * d + k]) + (e.data()[te * d + k] - xe.data()[te * d + k]);
                    cons_exact &= lhs == mr.data()[k] + me.data()[k];
                }
            }
        }
    }
    c.check(cons_exact, "conservation bit-exact on representable inputs");

    // General inputs: the gated sum against the two-term formula, and conservation to a few ulp.
    let (mut cons_gen, mut form_err) = (0f64, 0f64);
    for _ in 0..50 {
        let mr = randn(&[1, d], &mut rng);
        let me = randn(&[1, d], &mut rng);
        let alpha = gate(mr.data(), me.data());
        let (dr, de) = infusion_deltas(mr.data(), me.data(), alpha);
        for k in 0..d {
            let (a, b) = (mr.data()[k], me.data()[k]);
            cons_gen = cons_gen.max((dr[k] + de[k] - (a + b)).abs() / (a.abs() + b.abs()));
            form_err = form_err.max((dr[k] - (alpha * a + (1.0 - alpha) * b)).abs());
            form_err = form_err.max((de[k] - ((1.0 - alpha) * a + alpha * b)).abs());
        }
    }
    c.check(cons_gen < 1e-15, format!("conservation on random inputs {cons_gen:.2e} relative"));
    c.check(form_err < 1e-14, format!("infusion vs two-term formula {form_err:.2e}"));
    c.finish();
}

// Weighted BCE from its defining formula, computed without the stable rewrite.
fn oracle_bce(logits: &[f64], labels: &[f64], ratios: &[f64], a: usize) -> f64 {
    let n = logits.len();
    let mut total = 0.0;
    for i in 0..n {
        let (p, y, r) = (logits[i], labels[i], ratios[i % a]);
        let s = 1.0 / (1.0 + (-p).exp());
        let w = if y == 1.0 { (1.0 - r).exp() } else { r.exp() };
        total += -w * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
    }
    total / n as f64
}

#[test]
fn criterion_3_gradient_suite() {
    let _g = serial();
    let mut c = Criterion::new(3, "gradient suite");
    let mut rng = seeded_rng(303);
    let (b, a, h) = (4, 6, 1e-3);
    let (mut worst, mut loss_err) = (0f64, 0f64);
    for _ in 0..20 {
        let logits = gaussian(&[b, a], 2.0, &mut rng);
        let labels = Tensor::from_fn(&[b, a], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let ratios = attribute_ratios(&labels).unwrap();
        let (loss, _) = weighted_bce(&logits, &labels, &ratios).unwrap();
        let oracle = oracle_bce(logits.data(), labels.data(), ratios.data(), a);
        loss_err = loss_err.max((loss - oracle).abs());
        let g = weighted_bce_grad(&logits, &labels, &ratios).unwrap();
        for i in 0..b * a {
            let at = |offset: f64| {
                let mut x = logits.data().to_vec();
                x[i] += offset;
                oracle_bce(&x, labels.data(), ratios.data(), a)
            };
            // Fourth-order central stencil.
            let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let an = g.data()[i];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-12));
        }
    }
    c.check(worst < 1e-6, format!("analytic vs central difference {worst:.2e} < 1e-6"));
    c.check(loss_err < 1e-12, format!("loss vs defining formula {loss_err:.2e}"));

    let w = bce_weight(0.5f64, 1.0);
    let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
    let (l, _) = weighted_bce(&one(0.0), &one(1.0), &Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
    let direct = 0.5f64.exp() * 2f64.ln();
    c.check((w - 1.64872).abs() <= 1e-5, format!("hand w {w:.6} vs 1.64872"));
    c.check((l - direct).abs() < 1e-14, format!("hand L {l:.7} equals e^0.5 ln 2 = {direct:.7}"));
    // The stated hand value; e^0.5 ln 2 = 1.1428065 lies 2.35e-5 from it.
    c.check((l - 1.14283).abs() <= 1e-5, format!("hand L {l:.7} vs stated 1.14283 (tolerance 1e-5)"));
    c.finish();
}

// Counting oracle for every reported metric.
fn oracle_metrics(logits: &[f64], labels: &[f64], b: usize, a: usize) -> (f64, f64, f64, f64, f64, Vec<[u64; 4]>) {
    let mut per = vec![[0u64; 4]; a];
    for i in 0..b {
        for j in 0..a {
            let (p, y) = (logits[i * a + j] > 0.0, labels[i * a + j] == 1.0);
            let slot = match (p, y) {
                (true, true) => 0,
                (false, false) => 1,
                (true, false) => 2,
                (false, true) => 3,
            };
            per[j][slot] += 1;
        }
    }
    let div = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let ma = per.iter().map(|c| div(c[0] + c[1], c.iter().sum())).sum::<f64>() / a as f64;
    let s = |k: usize| per.iter().map(|c| c[k]).sum::<u64>();
    let (tp, tn, fp, fn_) = (s(0), s(1), s(2), s(3));
    let acc = div(tp + tn, tp + tn + fp + fn_);
    let prec = div(tp, tp + fp);
    let rec = div(tp, tp + fn_);
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    (ma, acc, prec, rec, f1, per)
}

fn metrics_match(logits: &Tensor<f64>, labels: &Tensor<f64>) -> (bool, f64, f64) {
    let [b, a] = *logits.dims() else { panic!() };
    let m = compute_metrics(logits, labels, 0.0).unwrap();
    let (ma, acc, prec, rec, f1, per) = oracle_metrics(logits.data(), labels.data(), b, a);
    let counts_ok = m
        .per_attribute
        .iter()
        .zip(&per)
        .all(|(c, o)| [c.tp, c.tn, c.fp, c.fn_] == *o);
    let ok = counts_ok && m.ma == ma && m.acc == acc && m.precision == prec && m.recall == rec && m.f1 == f1;
    (ok, m.ma, m.acc)
}

#[test]
fn criterion_4_metrics_suite() {
    let _g = serial();
    let mut c = Criterion::new(4, "metrics suite");
    let mut rng = seeded_rng(404);
    let mut all = true;
    for _ in 0..10 {
        let logits = randn(&[200, 10], &mut rng);
        let bias: Vec<f64> = (0..10).map(|_| rng.random_range(0.05..0.95)).collect();
        let labels = Tensor::from_fn(&[200, 10], |i| if rng.random::<f64>() < bias[i % 10] { 1.0 } else { 0.0 });
        all &= metrics_match(&logits, &labels).0;
    }
    c.check(all, "10 random (200 x 10) instances equal the counting oracle");

    // One rare attribute (2 positives in 200) that an all-negative predictor misses.
    let (b, a) = (200, 10);
    let labels = Tensor::from_fn(&[b, a], |i| {
        let (row, col) = (i / a, i % a);
        if col == 0 {
            f64::from(row < 2)
        } else {
            f64::from((row + col) % 2 == 0)
        }
    });
    let logits = Tensor::from_fn(&[b, a], |i| {
        let (row, col) = (i / a, i % a);
        if col == 0 {
            -1.0
        } else if (row + col) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    });
    let (ok, ma, acc) = metrics_match(&logits, &labels);
    c.check(ok, "crafted case equals the counting oracle");
    // Both definitions divide by the same totals when every attribute is scored on all
    // samples, so they coincide for any complete label matrix.
    c.check(
        (ma - acc).abs() > 1e-12,
        format!("crafted case mA {ma:.6} differs from Acc {acc:.6}"),
    );
    c.finish();
}

fn paper_resolution_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone.image_h = 256;
    cfg.backbone.image_w = 192;
    cfg.prompter.prompt_count = 8;
    cfg.prompter.inject_layers = vec![6, 8];
    cfg.backbone.depth = 8;
    cfg
}

#[test]
fn criterion_5_shape_injection_suite() {
    let _g = serial();
    let mut c = Criterion::new(5, "shape/injection suite");
    let cfg = paper_resolution_config();
    let attrs = vec!["a".to_string(), "b".to_string()];
    let mc = cfg.model_config(attrs.clone());
    let mut rng = seeded_rng(505);
    let model: Model<f32> = Model::new(mc.clone(), 5).unwrap();
    let d = mc.backbone.dim;
    let bank = MemoryBank::new(2, attrs.clone(), 0, gaussian(&[4, d], 1.0, &mut rng), gaussian(&[4, d], 1.0, &mut rng))
        .unwrap();
    let mut model = model;
    model.set_bank(bank.clone()).unwrap();
    let input = SampleInput {
        rgb: gaussian(&[1, 3, 256, 192], 1.0, &mut rng),
        events: gaussian(&[5, 3, 256, 192], 1.0, &mut rng).map(f32::abs),
    };
    let mut rec = SeqLenRecorder::default();
    model.forward(&input, &mut rec).unwrap();
    let expected: Vec<(usize, usize)> = (1..=8).map(|l| (l, if l == 6 || l == 8 { 201 } else { 193 })).collect();
    c.check(rec.lens == expected, format!("per-block lengths {:?}", rec.lens.iter().map(|x| x.1).collect::<Vec<_>>()));

    // P = 0 against no injection layers, on the backbone and through the full model.
    let bb = mc.backbone();
    let params: BackboneParams<f32> = BackboneParams::init(&bb, &mut rng).unwrap();
    let tokens = patch_embed(&input.rgb, &bb, &params).unwrap();
    let p0 = evprompt::backbone::BackboneConfig { prompt_count: 0, ..bb.clone() };
    let none = evprompt::backbone::BackboneConfig { inject_layers: vec![], ..bb.clone() };
    let empty = PromptSet { data: Tensor::zeros(&[1, 0, d]) };
    let full = PromptSet { data: gaussian(&[1, 8, d], 1.0, &mut rng) };
    let mut r0 = SeqLenRecorder::default();
    let a = forward_with_prompts(&tokens, Some(&empty), &p0, &params, &mut r0).unwrap();
    let b = forward_with_prompts(&tokens, Some(&full), &none, &params, &mut SeqLenRecorder::default()).unwrap();
    c.check(a.data == b.data, "backbone outputs bit-identical");
    c.check(r0.lens.iter().all(|&(_, n)| n == 193), "P=0 keeps 193 tokens everywhere");

    let mut cfg0 = cfg.clone();
    cfg0.prompter.prompt_count = 0;
    let mut cfg_none = cfg.clone();
    cfg_none.prompter.inject_layers = vec![];
    let mut m0: Model<f32> = Model::new(cfg0.model_config(attrs.clone()), 9).unwrap();
    let mut mn: Model<f32> = Model::new(cfg_none.model_config(attrs.clone()), 9).unwrap();
    // Prompt projections differ in shape; every other tensor is shared.
    mn.params.backbone = m0.params.backbone.clone();
    mn.params.mem_rgb = m0.params.mem_rgb.clone();
    mn.params.mem_evt = m0.params.mem_evt.clone();
    mn.params.head = m0.params.head.clone();
    mn.params.prompter.stem1_w = m0.params.prompter.stem1_w.clone();
    mn.params.prompter.stem2_w = m0.params.prompter.stem2_w.clone();
    mn.params.prompter.tokenizer = m0.params.prompter.tokenizer.clone();
    m0.set_bank(bank.clone()).unwrap();
    mn.set_bank(bank).unwrap();
    let l0 = m0.forward(&input, &mut SeqLenRecorder::default()).unwrap();
    let ln = mn.forward(&input, &mut SeqLenRecorder::default()).unwrap();
    c.check(l0 == ln, "full-model logits bit-identical");
    c.finish();
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [ci, h, wd] = *x.dims() else { panic!() };
    let [co, _, k, _] = *w.dims() else { panic!() };
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = bias.data()[o];
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((y * stride + ky) as isize - pad as isize, (xx * stride + kx) as isize - pad as isize);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.data()[(i * h + iy as usize) * wd + ix as usize] * w.data()[((o * ci + i) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out).unwrap()
}

#[test]
fn criterion_6_oracle_equivalence() {
    let _g = serial();
    let mut c = Criterion::new(6, "oracle equivalence");
    let mut rng = seeded_rng(606);

    let (mut mm64, mut mm32, mut cv64, mut cv32, mut sm32) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for _ in 0..100 {
        let (m, k, n) = (rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10));
        let a = randn(&[m, k], &mut rng);
        let b = randn(&[k, n], &mut rng);
        let naive = Tensor::from_fn(&[m, n], |i| (0..k).map(|l| a.data()[(i / n) * k + l] * b.data()[l * n + i % n]).sum());
        mm64 = mm64.max(matmul(&a, &b).unwrap().max_abs_diff(&naive));
        mm32 = mm32.max(max_abs(&matmul(&a.cast::<f32>(), &b.cast()).unwrap().cast::<f64>().into_data(), naive.data()));

        let x = randn(&[2, 6, 6], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let bias = randn(&[3], &mut rng);
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let naive = naive_conv(&x, &w, &bias, stride, pad);
        cv64 = cv64.max(conv2d(&x, &w, &bias, stride, pad).unwrap().max_abs_diff(&naive));
        let got32 = conv2d(&x.cast::<f32>(), &w.cast(), &bias.cast(), stride, pad).unwrap();
        cv32 = cv32.max(max_abs(&got32.cast::<f64>().into_data(), naive.data()));

        let s = gaussian(&[3, 7], 4.0, &mut rng);
        let beta: f64 = rng.random_range(0.1..3.0);
        let naive = Tensor::from_fn(&[3, 7], |i| {
            let row = &s.data()[(i / 7) * 7..(i / 7 + 1) * 7];
            let z: f64 = row.iter().map(|v: &f64| (beta * v).exp()).sum();
            (beta * s.data()[i]).exp() / z
        });
        sm32 = sm32.max(max_abs(&softmax_rows(&s.cast::<f32>(), beta as f32).unwrap().cast::<f64>().into_data(), naive.data()));
    }
    c.check(mm64 == 0.0, format!("matmul f64 exact ({mm64:.1e})"));
    c.check(mm32 < 1e-5, format!("matmul f32 {mm32:.2e}"));
    c.check(cv64 < 1e-12, format!("conv2d f64 {cv64:.2e}"));
    c.check(cv32 < 1e-5, format!("conv2d f32 {cv32:.2e}"));
    c.check(sm32 < 1e-5, format!("softmax f32 {sm32:.2e}"));

    // Voxelize against brute-force window scans with boundaries at exact multiples.
    let (h, w, f) = (6usize, 5usize, 5usize);
    let mut vox_ok = true;
    let mut surf_err = 0f64;
    for _ in 0..20 {
        let mut evs = vec![
            Event { x: 0, y: 0, t: 1000, p: 1 },
            Event { x: 1, y: 1, t: 2000, p: -1 },
        ];
        for _ in 0..60 {
            evs.push(Event {
                x: rng.random_range(0..w as u16),
                y: rng.random_range(0..h as u16),
                t: rng.random_range(1000..=2000),
                p: if rng.random::<bool>() { 1 } else { -1 },
            });
        }
        let stream = EventStream::new(w as u16, h as u16, evs.clone()).unwrap();
        let (t0, t1) = (1000.0, 2000.0);
        let bounds: Vec<f64> = (0..=f).map(|k| t0 + (t1 - t0) * k as f64 / f as f64).collect();
        let window = |t: f64| (0..f).find(|&k| t >= bounds[k] && (t < bounds[k + 1] || k == f - 1)).unwrap();
        let mut counts = vec![0.0; f * 2 * h * w];
        let mut latest = vec![None::<f64>; f * h * w];
        for e in &evs {
            let k = window(e.t as f64);
            let ch = if e.p > 0 { 0 } else { 1 };
            counts[(k * 2 + ch) * h * w + e.y as usize * w + e.x as usize] += 1.0;
            let slot = &mut latest[k * h * w + e.y as usize * w + e.x as usize];
            *slot = Some(slot.map_or(e.t as f64, |v: f64| v.max(e.t as f64)));
        }
        vox_ok &= voxel_counts(&stream, f, h, w).unwrap().data() == &counts[..];
        let v = voxelize::<f64>(&stream, f, h, w).unwrap();
        for k in 0..f {
            let plane = &counts[k * 2 * h * w..(k + 1) * 2 * h * w];
            let mx = plane.iter().fold(1.0f64, |m, &x| m.max(x));
            for (i, &cnt) in plane.iter().enumerate() {
                vox_ok &= v.data.data()[k * 3 * h * w + i] == cnt / mx;
            }
            for p in 0..h * w {
                let want = latest[k * h * w + p].map_or(0.0, |t| (t - bounds[k]) / (bounds[k + 1] - bounds[k]));
                surf_err = surf_err.max((v.data.data()[(k * 3 + 2) * h * w + p] - want).abs());
            }
        }
    }
    c.check(vox_ok, "voxelize counts exact");
    c.check(surf_err < 1e-12, format!("voxelize timestamp surface {surf_err:.2e}"));

    // k-means blob recovery.
    let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 5.0], [-4.0, 12.0, 1.0]];
    let mut worst = 0f64;
    for seed in 0..5 {
        let mut r = seeded_rng(seed);
        let noise = gaussian::<f64>(&[150, 3], 0.01, &mut r);
        let pts = Tensor::from_fn(&[150, 3], |i| centers[(i / 3) % 3][i % 3] + noise.data()[i]);
        let found = kmeans(&pts, 3, 100, &mut r).unwrap();
        for ctr in &centers {
            let best = (0..3)
                .map(|j| found.row(j).iter().zip(ctr).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
    }
    c.check(worst < 0.1, format!("k-means blob recovery {worst:.2e} < 0.1"));
    c.finish();
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evprompt"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn evprompt");
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn criterion_7_end_to_end_smoke() {
    let _g = serial();
    let mut c = Criterion::new(7, "end-to-end smoke");
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    std::fs::write(p("cfg.json"), r#"{"seed": 7, "memory": {"k": 8}, "train": {"steps": 200}}"#).unwrap();
    let start = Instant::now();
    run_ok(cli().args(["--seed", "7", "--out"]).arg(p("ds")).args(["synth", "--n", "64", "--A", "8"]));
    run_ok(cli().arg("--config").arg(p("cfg.json")).arg("--out").arg(p("bank")).arg("build-membank").arg("--dataset").arg(p("ds")));
    run_ok(cli().arg("--config").arg(p("cfg.json")).arg("--out").arg(p("ckpt")).arg("train").arg("--dataset").arg(p("ds")));
    run_ok(
        cli()
            .arg("--out")
            .arg(p("infer"))
            .arg("infer")
            .arg("--checkpoint")
            .arg(p("ckpt"))
            .arg("--bank")
            .arg(p("bank"))
            .arg("--dataset")
            .arg(p("ds"))
            .args(["--split", "test"]),
    );
    run_ok(
        cli()
            .arg("--out")
            .arg(p("eval"))
            .arg("eval")
            .arg("--logits")
            .arg(p("infer/logits.evt"))
            .arg("--labels")
            .arg(p("infer/labels.evt")),
    );
    let elapsed = start.elapsed().as_secs_f64();

    let loss = json(&p("ckpt/loss.json"));
    let trace: Vec<f64> = loss["loss"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let (first, last) = (trace[0], *trace.last().unwrap());
    let ma = json(&p("eval/metrics.json"))["mA"].as_f64().unwrap();
    let same_bank = std::fs::read(p("bank/rgb.evt")).unwrap() == std::fs::read(p("ckpt/bank/rgb.evt")).unwrap();
    c.check(trace.len() == 201, format!("{} loss entries", trace.len()));
    c.check(last < 0.7 * first, format!("loss {first:.4} -> {last:.4} (ratio {:.3} < 0.7)", last / first));
    c.check(ma > 0.75, format!("test mA {ma:.4} > 0.75"));
    c.check(elapsed < 180.0, format!("runtime {elapsed:.1}s < 180s"));
    c.check(same_bank, "standalone bank equals the training bank");
    c.finish();
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let mut c = Criterion::new(8, "determinism");
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    for run in ["st1", "st2"] {
        run_ok(cli().args(["--seed", "11", "--out"]).arg(p(run)).arg("selftest"));
    }
    for f in ["selftest.txt", "selftest.json"] {
        let same = std::fs::read(p("st1").join(f)).unwrap() == std::fs::read(p("st2").join(f)).unwrap();
        c.check(same, format!("selftest {f} byte-identical"));
    }

    std::fs::write(p("cfg.json"), r#"{"seed": 3, "memory": {"k": 2}, "train": {"steps": 5}}"#).unwrap();
    run_ok(cli().args(["--seed", "3", "--out"]).arg(p("ds")).args(["synth", "--n", "12", "--A", "3"]));
    run_ok(cli().arg("--config").arg(p("cfg.json")).arg("--out").arg(p("ckpt")).arg("train").arg("--dataset").arg(p("ds")));
    for run in ["i1", "i2"] {
        run_ok(
            cli()
                .arg("--out")
                .arg(p(run))
                .arg("infer")
                .arg("--checkpoint")
                .arg(p("ckpt"))
                .arg("--dataset")
                .arg(p("ds"))
                .args(["--split", "all"]),
        );
    }
    let same = std::fs::read(p("i1/logits.evt")).unwrap() == std::fs::read(p("i2/logits.evt")).unwrap();
    c.check(same, "infer logits byte-identical");
    c.finish();
}

#[test]
fn criterion_9_ablation_harness() {
    let _g = serial();
    let mut c = Criterion::new(9, "ablation harness");
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    std::fs::write(p("cfg.json"), r#"{"seed": 5, "memory": {"k": 2}, "train": {"steps": 5, "batch": 4}}"#).unwrap();
    run_ok(cli().args(["--seed", "5", "--out"]).arg(p("ds")).args(["synth", "--n", "12", "--A", "3"]));
    run_ok(
        cli()
            .arg("--config")
            .arg(p("cfg.json"))
            .arg("--out")
            .arg(p("abl"))
            .arg("ablate")
            .arg("--dataset")
            .arg(p("ds"))
            .args(["--ks", "1,2"]),
    );
    let runs = json(&p("abl/ablation.json"));
    let runs = runs.as_array().unwrap();
    let axes: std::collections::BTreeSet<&str> = runs.iter().map(|r| r["axis"].as_str().unwrap()).collect();
    for axis in ["rgb_frames", "inject_layers", "transform", "k", "modalities"] {
        c.check(axes.contains(axis), format!("axis {axis} present"));
    }
    let rgb_values: Vec<&str> = runs.iter().filter(|r| r["axis"] == "rgb_frames").map(|r| r["value"].as_str().unwrap()).collect();
    c.check(rgb_values == ["1", "2", "3", "4", "5"], "rgb_frames 1..5");
    let modes: Vec<&str> = runs.iter().filter(|r| r["axis"] == "modalities").map(|r| r["value"].as_str().unwrap()).collect();
    c.check(
        [Modalities::Rgb, Modalities::Event, Modalities::Both].iter().all(|m| modes.contains(&m.to_string().as_str())),
        "modalities rgb, event, both",
    );
    let mut schema_ok = true;
    for r in runs {
        let text = std::fs::read_to_string(p("abl").join(r["metrics_file"].as_str().unwrap())).unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["mA", "acc", "prec", "recall", "f1"] {
            let v = m[key].as_f64();
            schema_ok &= v.is_some_and(|v| (0.0..=1.0).contains(&v));
            schema_ok &= text.contains(&format!("\"{key}\": {:.6}", v.unwrap_or(-1.0)));
        }
        schema_ok &= m["per_attribute"].as_array().is_some_and(|a| a.len() == 3);
    }
    c.check(schema_ok, format!("{} metrics files share the schema", runs.len()));
    c.finish();
}
