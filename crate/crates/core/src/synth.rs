//! Synthetic RGB + event dataset with planted, linearly separable attribute signals,
//! and the loader for the on-disk layout.
//!
//! Layout: `manifest.json`, `labels.json`, `rgb/<id>.evt` (R×3×H×W f32 frames),
//! `events/<id>.evs`.
//!
//! Attribute `j` is planted as a thin horizontal bar of colour `j` at rows
//! `2·(j mod 8)` and `2·(j mod 8)+1` of every 16-pixel block row, and as a burst of
//! events sweeping along the same rows with polarity `+1` for even `j`, `−1` for odd.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{voxelize, Event, EventStream};
use crate::model::{read_json, write_json, SampleInput};
use crate::numerics::{evt1, seeded_rng, Rng, Scalar, Tensor};

/// Block height of the planted pattern; matches the token footprint of both streams.
const BLOCK: usize = 16;
const EVENT_SPAN_US: u64 = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub attributes: usize,
    pub height: usize,
    pub width: usize,
    /// RGB frames written per sample.
    pub rgb_frames: usize,
    /// Event frames the dataset is meant to be voxelized into.
    pub event_frames: usize,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n: 64,
            attributes: 8,
            height: 64,
            width: 48,
            rgb_frames: 5,
            event_frames: 5,
            test_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attributes == 0 {
            return Err(Error::config("synthetic dataset needs at least one attribute"));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(BLOCK) || !self.width.is_multiple_of(BLOCK) {
            return Err(Error::config(format!(
                "synthetic extents {}x{} must be positive multiples of {BLOCK}",
                self.height, self.width
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::config("synthetic extents exceed the event format range"));
        }
        if self.rgb_frames == 0 || self.event_frames == 0 {
            return Err(Error::config("rgb_frames and event_frames must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub rgb: String,
    pub events: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub rgb_frames: usize,
    pub event_frames: usize,
    pub attributes: Vec<String>,
    pub samples: Vec<SampleEntry>,
    /// Indices into `samples`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelsFile {
    attributes: Vec<String>,
    labels: Vec<Vec<u8>>,
}

fn attribute_color(j: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [1.0, 0.1, 0.1],
        [0.1, 1.0, 0.1],
        [0.1, 0.1, 1.0],
        [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0],
        [0.1, 1.0, 1.0],
        [1.0, 0.6, 0.1],
        [0.6, 0.1, 1.0],
    ];
    let base = PALETTE[j % 8];
    // later wraps get darker so attributes sharing a row band stay distinguishable
    let fade = 1.0 / (1 + j / 8) as f64;
    [base[0] * fade, base[1] * fade, base[2] * fade]
}

fn band_rows(j: usize, height: usize) -> impl Iterator<Item = usize> {
    let off = 2 * (j % 8);
    (0..height / BLOCK).flat_map(move |b| [b * BLOCK + off, b * BLOCK + off + 1])
}

/// Positive-label probability of attribute `j`, spread over [0.35, 0.65].
fn prevalence(j: usize, a: usize) -> f64 {
    if a == 1 {
        0.5
    } else {
        0.35 + 0.3 * j as f64 / (a - 1) as f64
    }
}

fn rgb_frames(cfg: &SynthConfig, labels: &[u8], rng: &mut Rng) -> Tensor<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let noise = Normal::new(0.0, 0.04).unwrap();
    let base: [f64; 3] = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
    let mut img = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                img[(c * h + y) * w + x] = base[c];
            }
        }
    }
    for (j, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let color = attribute_color(j);
        let gain: f64 = rng.random_range(0.8..1.0);
        let x0 = rng.random_range(0..w / 4);
        let x1 = rng.random_range(3 * w / 4..=w);
        for y in band_rows(j, h) {
            for x in x0..x1 {
                for (c, &col) in color.iter().enumerate() {
                    img[(c * h + y) * w + x] = col * gain;
                }
            }
        }
    }
    let mut frames = Vec::with_capacity(cfg.rgb_frames * img.len());
    for _ in 0..cfg.rgb_frames {
        frames.extend(img.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32));
    }
    Tensor::new(vec![cfg.rgb_frames, 3, h, w], frames).unwrap()
}

fn event_stream(cfg: &SynthConfig, labels: &[u8], rng: &mut Rng) -> EventStream {
    let (h, w) = (cfg.height, cfg.width);
    let mut events = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let p = if j % 2 == 0 { 1 } else { -1 };
        // an edge sweeping left to right along the attribute's rows
        for y in band_rows(j, h) {
            for x in 0..w {
                if rng.random::<f64>() < 0.7 {
                    let t = (x as u64 * EVENT_SPAN_US) / w as u64 + rng.random_range(0..500);
                    events.push(Event {
                        x: x as u16,
                        y: y as u16,
                        t,
                        p,
                    });
                }
            }
        }
    }
    let background = h * w / 16;
    for _ in 0..background {
        events.push(Event {
            x: rng.random_range(0..w) as u16,
            y: rng.random_range(0..h) as u16,
            t: rng.random_range(0..EVENT_SPAN_US),
            p: if rng.random::<bool>() { 1 } else { -1 },
        });
    }
    EventStream::new(w as u16, h as u16, events).expect("generated events are in range")
}

/// Writes a dataset to `dir`. Identical configs give byte-identical directories.
pub fn generate(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    for sub in ["rgb", "events"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = seeded_rng(cfg.seed);
    let attributes: Vec<String> = (0..cfg.attributes).map(|j| format!("attr{j:02}")).collect();
    let mut samples = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let y: Vec<u8> = (0..cfg.attributes)
            .map(|j| (rng.random::<f64>() < prevalence(j, cfg.attributes)) as u8)
            .collect();
        let id = format!("s{i:05}");
        let entry = SampleEntry {
            rgb: format!("rgb/{id}.evt"),
            events: format!("events/{id}.evs"),
            id,
        };
        evt1::write_file(dir.join(&entry.rgb), &rgb_frames(cfg, &y, &mut rng))?;
        event_stream(cfg, &y, &mut rng).write_file(dir.join(&entry.events))?;
        samples.push(entry);
        labels.push(y);
    }
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng);
    let n_test = (cfg.n as f64 * cfg.test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    let manifest = Manifest {
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        rgb_frames: cfg.rgb_frames,
        event_frames: cfg.event_frames,
        attributes: attributes.clone(),
        samples,
        train,
        test,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("labels.json"), &LabelsFile { attributes, labels })?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// A dataset directory on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
    /// `n × A` binary labels.
    pub labels: Tensor<f64>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        let lf: LabelsFile = read_json(&root.join("labels.json"))?;
        let (n, a) = (manifest.samples.len(), manifest.attributes.len());
        if lf.attributes != manifest.attributes || lf.labels.len() != n {
            return Err(Error::data("labels.json does not match manifest.json"));
        }
        let mut flat = Vec::with_capacity(n * a);
        for (i, row) in lf.labels.iter().enumerate() {
            if row.len() != a || row.iter().any(|&v| v > 1) {
                return Err(Error::data(format!("sample {i}: labels must be {a} values of 0 or 1")));
            }
            flat.extend(row.iter().map(|&v| v as f64));
        }
        if let Some(&i) = manifest.train.iter().chain(&manifest.test).find(|&&i| i >= n) {
            return Err(Error::data(format!("split index {i} out of range for {n} samples")));
        }
        Ok(Dataset {
            root,
            labels: Tensor::new(vec![n, a], flat)?,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.manifest.train.clone(),
            Split::Test => self.manifest.test.clone(),
            Split::All => (0..self.len()).collect(),
        }
    }

    pub fn labels_for(&self, idx: &[usize]) -> Result<Tensor<f64>> {
        let a = self.manifest.attributes.len();
        Tensor::new(
            vec![idx.len(), a],
            idx.iter().flat_map(|&i| self.labels.row(i).to_vec()).collect(),
        )
    }

    pub fn events(&self, i: usize) -> Result<EventStream> {
        EventStream::read_file(self.root.join(&self.manifest.samples[i].events))
    }

    /// The first `rgb_frames` RGB frames and the event stream voxelized into `event_frames`.
    pub fn input<T: Scalar>(&self, i: usize, rgb_frames: usize, event_frames: usize) -> Result<SampleInput<T>> {
        let entry = &self.manifest.samples[i];
        let rgb: Tensor<T> = evt1::read_file(self.root.join(&entry.rgb))?;
        let [r, 3, h, w] = *rgb.dims() else {
            return Err(Error::data(format!("{}: expected R×3×H×W, got {:?}", entry.rgb, rgb.dims())));
        };
        if rgb_frames > r {
            return Err(Error::config(format!("{rgb_frames} RGB frames requested, sample has {r}")));
        }
        let rgb = Tensor::new(vec![rgb_frames, 3, h, w], rgb.data()[..rgb_frames * 3 * h * w].to_vec())?;
        let events = voxelize(&self.events(i)?, event_frames, h, w)?.data;
        Ok(SampleInput { rgb, events })
    }
}
