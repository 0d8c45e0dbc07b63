//! Dataset-level operations composed from the modules: bank building, training,
//! inference, evaluation, and the ablation sweep.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::SeqLenRecorder;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::freq::Transform;
use crate::memory::{MemoryBank, Modalities};
use crate::model::{write_json, Model, PreparedSample, SampleInput};
use crate::numerics::{evt1, Tensor};
use crate::synth::{Dataset, Split};
use crate::train::{attribute_ratios, bank_from_inputs, compute_metrics, train_head, MetricsReport, TrainReport};

pub fn inputs(cfg: &RunConfig, ds: &Dataset, idx: &[usize]) -> Result<Vec<SampleInput<f32>>> {
    idx.iter()
        .map(|&i| ds.input(i, cfg.input.rgb_frames, cfg.input.event_frames))
        .collect()
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.manifest;
    if m.height != cfg.backbone.image_h || m.width != cfg.backbone.image_w {
        return Err(Error::config(format!(
            "dataset is {}x{}, config expects {}x{}",
            m.height, m.width, cfg.backbone.image_h, cfg.backbone.image_w
        )));
    }
    Ok(())
}

/// Fresh model for the dataset's attributes, initialized from the config seed.
pub fn init_model(cfg: &RunConfig, ds: &Dataset) -> Result<Model<f32>> {
    cfg.validate()?;
    check_dataset(cfg, ds)?;
    Model::new(cfg.model_config(ds.manifest.attributes.clone()), cfg.seed)
}

/// Bank from the model's features over the training split.
pub fn build_bank(cfg: &RunConfig, ds: &Dataset, model: &Model<f32>) -> Result<MemoryBank<f32>> {
    let train = ds.split(Split::Train);
    let labels = ds.labels_for(&train)?.cast();
    bank_from_inputs(model, &inputs(cfg, ds, &train)?, &labels, cfg.memory.k, cfg.seed)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub report: TrainReport,
}

/// Initializes a model, builds its bank, and trains the head on the training split.
pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    let mut model = init_model(cfg, ds)?;
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let inputs = inputs(cfg, ds, &train)?;
    let labels: Tensor<f32> = ds.labels_for(&train)?.cast();
    if model.config().memory.modalities != Modalities::None {
        let bank = bank_from_inputs(&model, &inputs, &labels, cfg.memory.k, cfg.seed)?;
        model.set_bank(bank)?;
    }
    let prepared: Vec<PreparedSample<f32>> = inputs.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let ratios = attribute_ratios(&labels)?;
    let report = train_head(&mut model, &prepared, &labels, &ratios, &cfg.train, cfg.seed)?;
    Ok(TrainOutcome { model, report })
}

/// Checkpoint directory layout: model files plus `bank/` when the model has one.
pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    model.save(dir)?;
    if let Some(bank) = model.bank() {
        bank.save(dir.join("bank"))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path, bank_override: Option<&Path>) -> Result<Model<f32>> {
    let mut model = Model::load(dir)?;
    let bank_dir = bank_override.map(Path::to_path_buf).unwrap_or_else(|| dir.join("bank"));
    if bank_dir.join("manifest.json").exists() {
        model.set_bank(MemoryBank::load(&bank_dir)?)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub samples: usize,
    pub total_ms: f64,
    pub per_sample_ms: Vec<f64>,
    pub mean_ms: f64,
    pub peak_seq_len: usize,
}

#[derive(Debug)]
pub struct InferOutcome {
    pub logits: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub timing: TimingReport,
}

pub fn infer(model: &Model<f32>, ds: &Dataset, split: Split) -> Result<InferOutcome> {
    let cfg = model.config();
    let idx = ds.split(split);
    let a = cfg.attributes.len();
    if ds.manifest.attributes.len() != a {
        return Err(Error::config("dataset attributes do not match the checkpoint"));
    }
    let mut logits = Vec::with_capacity(idx.len() * a);
    let mut per_sample_ms = Vec::with_capacity(idx.len());
    let mut peak = 0;
    let start = Instant::now();
    for &i in &idx {
        let s = ds.input(i, cfg.rgb_frames, cfg.event_frames)?;
        let mut rec = SeqLenRecorder::default();
        let t0 = Instant::now();
        let l = model.forward(&s, &mut rec)?;
        per_sample_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(rec.peak());
        logits.extend(l.into_data());
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let n = idx.len();
    Ok(InferOutcome {
        logits: Tensor::new(vec![n, a], logits)?,
        labels: ds.labels_for(&idx)?.cast(),
        timing: TimingReport {
            samples: n,
            total_ms,
            mean_ms: if n == 0 { 0.0 } else { per_sample_ms.iter().sum::<f64>() / n as f64 },
            per_sample_ms,
            peak_seq_len: peak,
        },
    })
}

pub fn write_infer(out: &InferOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    evt1::write_file(dir.join("logits.evt"), &out.logits)?;
    evt1::write_file(dir.join("labels.evt"), &out.labels)?;
    write_json(&dir.join("timing.json"), &out.timing)
}

pub fn eval(logits: &Tensor<f32>, labels: &Tensor<f32>) -> Result<MetricsReport> {
    compute_metrics(logits, labels, 0.0)
}

/// One configuration of the ablation sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub axis: String,
    pub value: String,
    pub ma: f64,
    pub acc: f64,
    pub prec: f64,
    pub recall: f64,
    pub f1: f64,
    pub final_loss: f64,
    pub metrics_file: String,
}

/// Variants along the three axes: RGB frame count; injection layers and transform;
/// bank size and memory modalities. Every other setting stays at `base`.
pub fn ablation_variants(base: &RunConfig, ks: &[usize]) -> Vec<(String, String, RunConfig)> {
    let mut out = Vec::new();
    for r in 1..=5 {
        let mut c = base.clone();
        c.input.rgb_frames = r;
        c.input.event_frames = 5;
        out.push(("rgb_frames".to_string(), r.to_string(), c));
    }
    let depth = base.backbone.depth;
    let layer_sets: Vec<Vec<usize>> = vec![
        vec![depth - 2, depth],
        vec![depth],
        (1..=depth).collect(),
        vec![],
    ];
    for layers in layer_sets {
        let mut c = base.clone();
        let name = if layers.is_empty() {
            "none".to_string()
        } else {
            layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
        };
        c.prompter.inject_layers = layers;
        out.push(("inject_layers".to_string(), name, c));
    }
    for t in [Transform::Dct, Transform::Dft, Transform::None] {
        let mut c = base.clone();
        c.prompter.transform = t;
        out.push(("transform".to_string(), t.to_string(), c));
    }
    for &k in ks {
        let mut c = base.clone();
        c.memory.k = k;
        out.push(("k".to_string(), k.to_string(), c));
    }
    for m in [Modalities::Both, Modalities::Rgb, Modalities::Event, Modalities::None] {
        let mut c = base.clone();
        c.memory.modalities = m;
        out.push(("modalities".to_string(), m.to_string(), c));
    }
    out
}

/// Trains and evaluates every variant, writing `<axis>_<value>/metrics.json` and `ablation.json`.
pub fn ablate(base: &RunConfig, ds: &Dataset, ks: &[usize], out_dir: &Path) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for (axis, value, cfg) in ablation_variants(base, ks) {
        log::info!("ablation {axis}={value}");
        let trained = train(&cfg, ds)?;
        let res = infer(&trained.model, ds, Split::Test)?;
        let m = eval(&res.logits, &res.labels)?;
        let rel = format!("{axis}_{value}/metrics.json");
        let path = out_dir.join(&rel);
        let parent = path.parent().unwrap();
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        std::fs::write(&path, m.to_json(Some(&ds.manifest.attributes))).map_err(|e| Error::io(&path, e))?;
        runs.push(AblationRun {
            axis,
            value,
            ma: m.ma,
            acc: m.acc,
            prec: m.precision,
            recall: m.recall,
            f1: m.f1,
            final_loss: *trained.report.loss.last().unwrap(),
            metrics_file: rel,
        });
    }
    write_json(&out_dir.join("ablation.json"), &runs)?;
    Ok(runs)
}
