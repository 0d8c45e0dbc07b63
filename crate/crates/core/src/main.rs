use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use evprompt::config::RunConfig;
use evprompt::events::{voxelize, EventStream};
use evprompt::model::Model;
use evprompt::numerics::{evt1, Tensor};
use evprompt::pipeline;
use evprompt::selftest;
use evprompt::synth::{generate, Dataset, Split, SynthConfig};
use evprompt::train::{gradcheck_bce, gradcheck_model, sigmoid};
use evprompt::{Error, Result};

/// Exit code for a failed self-test or gradient check.
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser)]
#[command(name = "evprompt", version, about = "RGB + event pedestrian attribute recognition toolkit")]
struct Cli {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with planted attribute signals.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long = "A", default_value_t = 8)]
        attributes: usize,
        #[arg(long = "H", default_value_t = 64)]
        height: usize,
        #[arg(long = "W", default_value_t = 48)]
        width: usize,
        /// RGB frames written per sample.
        #[arg(long = "F", default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
    },
    /// Voxelize an event stream file into frames.
    EncodeEvents {
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        frames: usize,
    },
    /// Build the external memory bank from the training split.
    BuildMembank {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the head and prompt projection, then write a checkpoint.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run a checkpoint over a dataset split.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Bank directory overriding the checkpoint's own bank.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Probability above which an attribute is listed in predictions.json (display only).
        #[arg(long, default_value_t = 0.9)]
        vis_threshold: f64,
    },
    /// Compute metrics from logits and labels tensors.
    Eval {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck,
    /// Run the invariant suite.
    Selftest,
    /// Train and evaluate every ablation variant on a dataset.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Bank sizes for the memory axis.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        ks: Vec<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let msg = serde_json::json!({ "kind": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.cmd {
        Cmd::Synth {
            n,
            attributes,
            height,
            width,
            frames,
            test_fraction,
        } => {
            let sc = SynthConfig {
                seed: cli.seed.unwrap_or(SynthConfig::default().seed),
                n,
                attributes,
                height,
                width,
                rgb_frames: frames,
                event_frames: cfg.input.event_frames,
                test_fraction,
            };
            let m = generate(&sc, &out)?;
            println!("{} samples ({} train, {} test) in {}", m.samples.len(), m.train.len(), m.test.len(), out.display());
        }
        Cmd::EncodeEvents { input, frames } => {
            let stream = EventStream::read_file(&input)?;
            let v = voxelize::<f32>(&stream, frames, stream.height(), stream.width())?;
            mkdir(&out)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("events");
            let path = out.join(format!("{stem}.evt"));
            evt1::write_file(&path, &v.data)?;
            println!("{} events -> {:?} in {}", stream.len(), v.data.dims(), path.display());
        }
        Cmd::BuildMembank { dataset } => {
            let ds = Dataset::load(required(dataset, &cfg.paths.dataset, "dataset")?)?;
            let model = pipeline::init_model(&cfg, &ds)?;
            let bank = pipeline::build_bank(&cfg, &ds, &model)?;
            bank.save(&out)?;
            println!("bank {}x{} (checksum {:016x}) in {}", bank.rgb().dims()[0], bank.dim(), bank.checksum(), out.display());
        }
        Cmd::Train { dataset } => {
            let ds = Dataset::load(required(dataset, &cfg.paths.dataset, "dataset")?)?;
            let res = pipeline::train(&cfg, &ds)?;
            pipeline::save_checkpoint(&res.model, &out)?;
            write_json(&out.join("loss.json"), &res.report)?;
            let l = &res.report.loss;
            println!("loss {:.6} -> {:.6}, checkpoint in {}", l[0], l[l.len() - 1], out.display());
        }
        Cmd::Infer {
            checkpoint,
            dataset,
            bank,
            split,
            vis_threshold,
        } => {
            let ckpt = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let ds = Dataset::load(required(dataset, &cfg.paths.dataset, "dataset")?)?;
            let bank = bank.or_else(|| cfg.paths.bank.clone());
            let model = pipeline::load_checkpoint(&ckpt, bank.as_deref())?;
            let res = pipeline::infer(&model, &ds, split)?;
            pipeline::write_infer(&res, &out)?;
            write_json(&out.join("predictions.json"), &visible(&model, &res.logits, vis_threshold))?;
            println!(
                "{} samples, mean {:.3} ms, peak sequence length {}",
                res.timing.samples, res.timing.mean_ms, res.timing.peak_seq_len
            );
        }
        Cmd::Eval { logits, labels } => {
            let l: Tensor<f32> = evt1::read_file(&logits)?;
            let y: Tensor<f32> = evt1::read_file(&labels)?;
            let m = pipeline::eval(&l, &y)?;
            let json = m.to_json(None);
            mkdir(&out)?;
            write_text(&out.join("metrics.json"), &json)?;
            print!("{json}");
        }
        Cmd::Gradcheck => {
            let bce = gradcheck_bce(cfg.seed, 20, 4, 6, 1e-3)?;
            let model = gradcheck_tiny_model(cfg.seed)?;
            let report = serde_json::json!({
                "seed": cfg.seed,
                "bce_max_rel_err": bce,
                "bce_limit": 1e-6,
                "model_max_rel_err": model,
                "model_limit": 1e-5,
                "passed": bce < 1e-6 && model < 1e-5,
            });
            mkdir(&out)?;
            write_json(&out.join("gradcheck.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !(bce < 1e-6 && model < 1e-5) {
                return Ok(EXIT_SELFTEST);
            }
        }
        Cmd::Selftest => {
            let report = selftest::run(&cfg)?;
            mkdir(&out)?;
            write_text(&out.join("selftest.txt"), &report.table())?;
            write_text(&out.join("selftest.json"), &report.to_json())?;
            print!("{}", report.table());
            if !report.passed() {
                return Ok(EXIT_SELFTEST);
            }
        }
        Cmd::Ablate { dataset, ks } => {
            let ds = Dataset::load(required(dataset, &cfg.paths.dataset, "dataset")?)?;
            let runs = pipeline::ablate(&cfg, &ds, &ks, &out)?;
            println!("{:<14} {:<10} {:>8} {:>8} {:>8}", "axis", "value", "mA", "acc", "f1");
            for r in runs {
                println!("{:<14} {:<10} {:>8.4} {:>8.4} {:>8.4}", r.axis, r.value, r.ma, r.acc, r.f1);
            }
        }
    }
    Ok(0)
}

fn gradcheck_tiny_model(seed: u64) -> Result<f64> {
    let (model, prepared, labels) = selftest::tiny_gradcheck_setup(seed)?;
    gradcheck_model(&model, &prepared, &labels, 1e-4)
}

/// Attributes whose predicted probability exceeds `threshold`, per sample.
fn visible(model: &Model<f32>, logits: &Tensor<f32>, threshold: f64) -> serde_json::Value {
    let names = &model.config().attributes;
    let a = names.len();
    let rows: Vec<Vec<&str>> = logits
        .data()
        .chunks(a.max(1))
        .map(|row| {
            row.iter()
                .zip(names)
                .filter(|(&l, _)| sigmoid(l as f64) > threshold)
                .map(|(_, n)| n.as_str())
                .collect()
        })
        .collect();
    serde_json::json!({ "threshold": threshold, "samples": rows })
}
