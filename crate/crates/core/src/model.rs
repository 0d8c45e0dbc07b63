//! End-to-end model: RGB ViT with event prompts, dual memory, fusion head.
//!
//! Only `M_proj`, `W_cls`, and `b_cls` are trainable. Training runs on
//! [`PreparedSample`]s, which cache everything upstream of the first injected block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    blocks_backward, patch_embed, run_blocks, run_blocks_cached, BackboneConfig, BackboneParams, BlocksCache,
    ForwardHook, NoHook,
};
use crate::error::{Error, Result};
use crate::head::{
    classify_sample, cross_attend_backward, cross_attend_cached, pooled_features, CrossCache, HeadConfig, HeadParams,
};
use crate::memory::{
    external_retrieve_backward, external_retrieve_cached, infuse_sample, infusion_backward, internal_enhance_backward,
    internal_enhance_cached, Dropout, EnhanceCache, InternalMemoryParams, MemoryBank, MemoryConfig,
};
use crate::nn::{cast_store, load_store, module, to_store, Module, ParamStore};
use crate::numerics::{evt1, matmul, matmul_bt, mean_rows, seeded_rng, Scalar, Tensor};
use crate::prompter::{frame_tokens, mean_over_frames, project, PrompterConfig, PrompterParams};

/// Everything needed to build a model. Prompt count and injection layers live in the
/// prompter section; [`ModelConfig::backbone`] returns the backbone view with them filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub prompter: PrompterConfig,
    pub memory: MemoryConfig,
    pub head: HeadConfig,
    pub attributes: Vec<String>,
    pub rgb_frames: usize,
    pub event_frames: usize,
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            inject_layers: self.prompter.inject_layers.clone(),
            prompt_count: self.prompter.prompt_count,
            ..self.backbone.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone();
        bb.validate()?;
        self.prompter.validate()?;
        self.memory.validate()?;
        self.head.validate(bb.dim)?;
        if !bb.image_h.is_multiple_of(16) || !bb.image_w.is_multiple_of(16) || bb.patch != 16 {
            return Err(Error::config(format!(
                "event tokens use a 16-pixel footprint: need patch 16 and image extents divisible by 16, got patch {} on {}x{}",
                bb.patch, bb.image_h, bb.image_w
            )));
        }
        if self.attributes.is_empty() {
            return Err(Error::config("at least one attribute is required"));
        }
        if self.rgb_frames == 0 || self.event_frames == 0 {
            return Err(Error::config("rgb_frames and event_frames must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub backbone: BackboneParams<T>,
    pub prompter: PrompterParams<T>,
    pub mem_rgb: InternalMemoryParams<T>,
    pub mem_evt: InternalMemoryParams<T>,
    pub head: HeadParams<T>,
}
module!(ModelParams { backbone, prompter, mem_rgb, mem_evt, head });

/// One sample: `rgb` is R×3×H×W, `events` is F×3×H×W voxel frames.
#[derive(Debug, Clone)]
pub struct SampleInput<T> {
    pub rgb: Tensor<T>,
    pub events: Tensor<T>,
}

/// Frozen upstream state of one sample.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    /// Tokens entering the first injected block (or the backbone output before the final
    /// norm when nothing is injected).
    x0: Tensor<T>,
    /// Frame-averaged event tokens `N_p × D`.
    mean_tokens: Tensor<T>,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn mean_tokens(&self) -> &Tensor<T> {
        &self.mean_tokens
    }
}

/// Gradients of the trainable tensors.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub proj: Tensor<T>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Grads {
            proj: Tensor::zeros(params.prompter.proj.dims()),
            cls_w: Tensor::zeros(params.head.cls.w.dims()),
            cls_b: Tensor::zeros(params.head.cls.b.dims()),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) -> Result<()> {
        self.proj.add_assign(&other.proj)?;
        self.cls_w.add_assign(&other.cls_w)?;
        self.cls_b.add_assign(&other.cls_b)
    }
}

struct MemCache<T> {
    enh_rgb: Option<(EnhanceCache<T>, Tensor<T>, Tensor<T>)>,
    m_evt: Option<Tensor<T>>,
    rows_rgb: usize,
}

/// Cache of one trainable forward pass.
pub struct SampleCache<T> {
    blocks: Option<BlocksCache<T>>,
    x_last: Tensor<T>,
    prompts: usize,
    mem: MemCache<T>,
    cross: CrossCache<T>,
    pooled: Tensor<T>,
    rows: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    pub params: ModelParams<T>,
    bank: Option<MemoryBank<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dtype: String,
    params: Vec<ParamEntry>,
}

fn sum_rows<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let d = x.last_dim();
    let mut acc = vec![T::zero(); d];
    for row in x.data().chunks(d.max(1)) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    acc
}

fn add_row<T: Scalar>(x: &Tensor<T>, v: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(v.len().max(1)) {
        for (a, &b) in row.iter_mut().zip(v) {
            *a = *a + b;
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bb = cfg.backbone();
        let mut rng = seeded_rng(seed);
        let backbone = BackboneParams::init(&bb, &mut rng)?;
        let prompter = PrompterParams::init(&cfg.prompter, bb.dim, bb.num_patches(), &mut rng);
        let mem_rgb = InternalMemoryParams::init(bb.dim, cfg.memory.prototypes, &mut rng);
        let mem_evt = InternalMemoryParams::init(bb.dim, cfg.memory.prototypes, &mut rng);
        let head = HeadParams::init(&cfg.head, bb.dim, cfg.attributes.len(), &mut rng)?;
        Ok(Model {
            cfg,
            params: ModelParams {
                backbone,
                prompter,
                mem_rgb,
                mem_evt,
                head,
            },
            bank: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn bank(&self) -> Option<&MemoryBank<T>> {
        self.bank.as_ref()
    }

    pub fn set_bank(&mut self, bank: MemoryBank<T>) -> Result<()> {
        if bank.dim() != self.cfg.backbone.dim || bank.attributes().len() != self.cfg.attributes.len() {
            return Err(Error::config(format!(
                "bank has dim {} and {} attributes, model expects {} and {}",
                bank.dim(),
                bank.attributes().len(),
                self.cfg.backbone.dim,
                self.cfg.attributes.len()
            )));
        }
        self.bank = Some(bank);
        Ok(())
    }

    fn beta(&self) -> T {
        T::c(self.cfg.memory.beta_for(self.cfg.backbone.dim))
    }

    fn check_input(&self, s: &SampleInput<T>) -> Result<()> {
        let bb = &self.cfg.backbone;
        let want_rgb = [self.cfg.rgb_frames, 3, bb.image_h, bb.image_w];
        let want_evt = [self.cfg.event_frames, 3, bb.image_h, bb.image_w];
        if s.rgb.dims() != want_rgb || s.events.dims() != want_evt {
            return Err(Error::Shape {
                op: "model_input",
                lhs: [s.rgb.dims(), s.events.dims()].concat(),
                rhs: [&want_rgb[..], &want_evt[..]].concat(),
            });
        }
        Ok(())
    }

    /// RGB tokens averaged over the RGB frames, `(N_p+1) × D`.
    fn rgb_tokens(&self, rgb: &Tensor<T>) -> Result<Tensor<T>> {
        let seq = patch_embed(rgb, &self.cfg.backbone(), &self.params.backbone)?;
        mean_over_frames(&seq.data)
    }

    fn event_tokens(&self, events: &Tensor<T>) -> Result<Tensor<T>> {
        let grid = self.cfg.backbone.grid();
        mean_over_frames(&frame_tokens(events, &self.cfg.prompter, grid, &self.params.prompter)?)
    }

    /// Backbone output (after the final norm) and the event token stream for one sample.
    pub fn encode(&self, s: &SampleInput<T>, hook: &mut dyn ForwardHook) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(s)?;
        let bb = self.cfg.backbone();
        let mean_tokens = self.event_tokens(&s.events)?;
        let prompts = project(&mean_tokens, &self.params.prompter)?;
        let prompts = (!bb.inject_layers.is_empty()).then_some(&prompts);
        let x = run_blocks(&self.rgb_tokens(&s.rgb)?, prompts, 1, bb.depth, &bb, &self.params.backbone, hook)?;
        Ok((self.params.backbone.norm.forward(&x)?, mean_tokens))
    }

    /// Pooled internally-enhanced features `(rgb, event)` used to build the bank.
    pub fn bank_features(&self, s: &SampleInput<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (x_rgb, x_evt) = self.encode(s, &mut NoHook)?;
        let beta = self.beta();
        let er = internal_enhance_cached(&x_rgb, &self.params.mem_rgb, beta, &Dropout::Disabled)?.0;
        let ee = internal_enhance_cached(&x_evt, &self.params.mem_evt, beta, &Dropout::Disabled)?.0;
        Ok((mean_rows(&er)?, mean_rows(&ee)?))
    }

    fn bank_or_err(&self) -> Result<&MemoryBank<T>> {
        self.bank
            .as_ref()
            .ok_or_else(|| Error::config("memory bank required for the configured modalities"))
    }

    fn memory_stage(
        &self,
        x_rgb: &Tensor<T>,
        x_evt: &Tensor<T>,
        dropout: &Dropout,
    ) -> Result<(Tensor<T>, Tensor<T>, MemCache<T>)> {
        let mods = self.cfg.memory.modalities;
        let beta = self.beta();
        let mut cache = MemCache {
            enh_rgb: None,
            m_evt: None,
            rows_rgb: x_rgb.dims()[0],
        };
        if !mods.rgb() && !mods.event() {
            return Ok((x_rgb.clone(), x_evt.clone(), cache));
        }
        let bank = self.bank_or_err()?;
        let mut out_r = x_rgb.clone();
        let mut out_e = x_evt.clone();
        let mut m_r = None;
        if mods.rgb() {
            let (er, ec) = internal_enhance_cached(x_rgb, &self.params.mem_rgb, beta, dropout)?;
            let q = mean_rows(&er)?;
            let d = q.len();
            let (m, probs) = external_retrieve_cached(&q.reshape(&[1, d])?, bank.rgb(), beta)?;
            out_r = er;
            m_r = Some(m.clone());
            cache.enh_rgb = Some((ec, probs, m));
        }
        if mods.event() {
            let (ee, _) = internal_enhance_cached(x_evt, &self.params.mem_evt, beta, &Dropout::Disabled)?;
            let q = mean_rows(&ee)?;
            let d = q.len();
            let (m, _) = external_retrieve_cached(&q.reshape(&[1, d])?, bank.event(), beta)?;
            out_e = ee;
            cache.m_evt = Some(m);
        }
        match (m_r, &cache.m_evt) {
            (Some(mr), Some(me)) => {
                let (r, e, _) = infuse_sample(&out_r, &out_e, mr.data(), me.data())?;
                Ok((r, e, cache))
            }
            (Some(mr), None) => Ok((add_row(&out_r, mr.data()), out_e, cache)),
            (None, Some(me)) => Ok((out_r, add_row(&out_e, me.data()), cache)),
            (None, None) => unreachable!(),
        }
    }

    /// Gradient into the RGB stream entering the memory stage. The event stream does not
    /// depend on any trainable tensor, so its gradient is not propagated.
    fn memory_backward(&self, cache: &MemCache<T>, d_rgb: &Tensor<T>, d_evt: &Tensor<T>) -> Result<Tensor<T>> {
        let Some((ec, probs, m_r)) = &cache.enh_rgb else {
            return Ok(d_rgb.clone());
        };
        let bank = self.bank_or_err()?;
        let beta = self.beta();
        let g_r = sum_rows(d_rgb);
        let dm_r = match &cache.m_evt {
            Some(me) => infusion_backward(m_r.data(), me.data(), &g_r, &sum_rows(d_evt)).0,
            None => g_r,
        };
        let d = dm_r.len();
        let dq = external_retrieve_backward(probs, bank.rgb(), beta, &Tensor::new(vec![1, d], dm_r)?)?;
        let inv = T::one() / T::from_usize(cache.rows_rgb).unwrap();
        let dq: Vec<T> = dq.data().iter().map(|&v| v * inv).collect();
        let d_enh = add_row(d_rgb, &dq);
        internal_enhance_backward(ec, &self.params.mem_rgb, beta, &d_enh)
    }

    /// Logits for one sample.
    pub fn forward(&self, s: &SampleInput<T>, hook: &mut dyn ForwardHook) -> Result<Tensor<T>> {
        let (x_rgb, x_evt) = self.encode(s, hook)?;
        let (r, e, _) = self.memory_stage(&x_rgb, &x_evt, &Dropout::Disabled)?;
        let heads = self.cfg.head.heads;
        let (r, e, _) = cross_attend_cached(&r, &e, &self.params.head, heads)?;
        classify_sample(&r, &e, &self.params.head.cls)
    }

    /// Runs everything that does not depend on a trainable tensor.
    pub fn prepare(&self, s: &SampleInput<T>) -> Result<PreparedSample<T>> {
        self.check_input(s)?;
        let bb = self.cfg.backbone();
        let first = bb.first_injected().unwrap_or(bb.depth + 1);
        let x0 = run_blocks(
            &self.rgb_tokens(&s.rgb)?,
            None,
            1,
            first - 1,
            &bb,
            &self.params.backbone,
            &mut NoHook,
        )?;
        Ok(PreparedSample {
            x0,
            mean_tokens: self.event_tokens(&s.events)?,
        })
    }

    /// Logits of a prepared sample plus the cache for [`Model::backward_prepared`].
    pub fn forward_prepared(&self, p: &PreparedSample<T>, dropout: &Dropout) -> Result<(Tensor<T>, SampleCache<T>)> {
        let bb = self.cfg.backbone();
        let (x_last, blocks, prompts) = match bb.first_injected() {
            Some(first) => {
                let prompts = project(&p.mean_tokens, &self.params.prompter)?;
                let (x, c) = run_blocks_cached(&p.x0, &prompts, first, bb.depth, &bb, &self.params.backbone)?;
                (x, Some(c), prompts.dims()[0])
            }
            None => (p.x0.clone(), None, 0),
        };
        let x_rgb = self.params.backbone.norm.forward(&x_last)?;
        let (r, e, mem) = self.memory_stage(&x_rgb, &p.mean_tokens, dropout)?;
        let (r, e, cross) = cross_attend_cached(&r, &e, &self.params.head, self.cfg.head.heads)?;
        let rows = r.dims()[0] + e.dims()[0];
        let pooled = pooled_features(&r, &e)?;
        let d = pooled.len();
        let a = self.params.head.cls.b.len();
        let logits = self.params.head.cls.forward(&pooled.clone().reshape(&[1, d])?)?.reshape(&[a])?;
        Ok((
            logits,
            SampleCache {
                blocks,
                x_last,
                prompts,
                mem,
                cross,
                pooled,
                rows,
            },
        ))
    }

    /// Gradients of the trainable tensors given `d loss / d logits` for one sample.
    pub fn backward_prepared(&self, p: &PreparedSample<T>, cache: &SampleCache<T>, dlogits: &Tensor<T>) -> Result<Grads<T>> {
        let cls = &self.params.head.cls;
        let (a, d) = (cls.b.len(), cache.pooled.len());
        let dl = dlogits.clone().reshape(&[1, a])?;
        let (cls_w, cls_b) = cls.backward_params(&cache.pooled.clone().reshape(&[1, d])?, &dl)?;
        let mut grads = Grads {
            proj: Tensor::zeros(self.params.prompter.proj.dims()),
            cls_w,
            cls_b,
        };
        if cache.blocks.is_none() {
            return Ok(grads);
        }
        let df = cls.backward_input(&dl)?;
        let inv = T::one() / T::from_usize(cache.rows).unwrap();
        let drow: Vec<T> = df.data().iter().map(|&v| v * inv).collect();
        let n_r = cache.mem.rows_rgb;
        let n_e = cache.rows - n_r;
        let d_r = Tensor::from_fn(&[n_r, d], |i| drow[i % d]);
        let d_e = Tensor::from_fn(&[n_e, d], |i| drow[i % d]);
        let (d_r, d_e) = cross_attend_backward(&cache.cross, &self.params.head, &d_r, &d_e)?;
        let d_rgb = self.memory_backward(&cache.mem, &d_r, &d_e)?;
        let d_last = self.params.backbone.norm.backward(&cache.x_last, &d_rgb)?;
        let blocks = cache.blocks.as_ref().unwrap();
        let (_, dprompts) = blocks_backward(blocks, &d_last, &self.params.backbone, cache.prompts)?;
        grads.proj = matmul_bt(&dprompts, &p.mean_tokens)?;
        Ok(grads)
    }

    /// Plain gradient-descent step on the trainable tensors.
    pub fn apply_grads(&mut self, g: &Grads<T>, lr: T) -> Result<()> {
        let step = |p: &mut Tensor<T>, g: &Tensor<T>| -> Result<()> { p.add_assign(&g.scale(-lr)) };
        step(&mut self.params.prompter.proj, &g.proj)?;
        step(&mut self.params.head.cls.w, &g.cls_w)?;
        step(&mut self.params.head.cls.b, &g.cls_b)
    }

    /// Writes `config.json`, `params.json`, and `params.evt` (all tensors flattened in name order).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let store = to_store(&self.params);
        let manifest = CheckpointManifest {
            dtype: T::DTYPE.name().to_string(),
            params: store
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
        };
        let flat: Vec<T> = store.values().flat_map(|t| t.data().to_vec()).collect();
        write_json(&dir.join("config.json"), &self.cfg)?;
        write_json(&dir.join("params.json"), &manifest)?;
        evt1::write_file(dir.join("params.evt"), &Tensor::new(vec![flat.len()], flat)?)
    }

    /// Loads a checkpoint written by [`Model::save`] (in any stored precision).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg: ModelConfig = read_json(&dir.join("config.json"))?;
        let manifest: CheckpointManifest = read_json(&dir.join("params.json"))?;
        let flat: Tensor<T> = evt1::read_file(dir.join("params.evt"))?;
        let mut store = ParamStore::new();
        let mut offset = 0;
        for entry in manifest.params {
            let n: usize = entry.dims.iter().product();
            let Some(data) = flat.data().get(offset..offset + n) else {
                return Err(Error::data("checkpoint parameter file shorter than its manifest"));
            };
            store.insert(entry.name, Tensor::new(entry.dims, data.to_vec())?);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::data("checkpoint parameter file longer than its manifest"));
        }
        let mut model = Model::new(cfg, 0)?;
        load_store(&mut model.params, &store)?;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(self.cfg.clone(), 0)?;
        load_store(&mut out.params, &cast_store(&to_store(&self.params)))?;
        out.bank = self.bank.as_ref().map(|b| b.cast());
        Ok(out)
    }

    /// Checksum over every parameter tensor.
    pub fn checksum(&self) -> u64 {
        crate::nn::checksum(&self.params)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.params.visit("", &mut |_, t| n += t.len());
        n
    }

    /// `M_proj · T̄` for a prepared sample.
    pub fn prompts_for(&self, p: &PreparedSample<T>) -> Result<Tensor<T>> {
        matmul(&self.params.prompter.proj, &p.mean_tokens)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
