//! Toy Vision Transformer with deep prompt injection.
//!
//! Prompts are concatenated right after the class token before each listed block and
//! sliced off again after it, so the sequence outside injected blocks is always
//! `N_p + 1` tokens long.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{module, Attention, AttentionCache, Linear, Mlp, MlpCache, Norm};
use crate::numerics::{concat_rows, gaussian, slice_rows, Rng, Scalar, Tensor};

/// `inject_layers` and `prompt_count` are not serialized: in a run configuration they
/// belong to the prompter section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices that receive prompts.
    #[serde(skip)]
    pub inject_layers: Vec<usize>,
    #[serde(skip)]
    pub prompt_count: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_h: 64,
            image_w: 48,
            patch: 16,
            dim: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            inject_layers: vec![6, 8],
            prompt_count: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::config("image extents must be positive"));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("depth and mlp_ratio must be positive"));
        }
        if let Some(&l) = self.inject_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(Error::config(format!("inject layer {l} outside 1..={}", self.depth)));
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn is_injected(&self, layer: usize) -> bool {
        self.inject_layers.contains(&layer)
    }

    pub fn first_injected(&self) -> Option<usize> {
        self.inject_layers.iter().copied().min()
    }
}

/// `B × N × D` activations plus what they contain.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub data: Tensor<T>,
    pub has_cls: bool,
    pub prompts: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.dims()[2]
    }

    /// Tokens of sample `b` as an `N × D` matrix.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        self.data.slice0(b)
    }
}

/// `B × P × D` prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> PromptSet<T> {
    pub fn count(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn sample(&self, b: usize) -> Tensor<T> {
        self.data.slice0(b)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub mlp: Mlp<T>,
}
module!(Block { norm1, attn, norm2, mlp });

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    x1: Tensor<T>,
    attn: AttentionCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Block {
            norm1: Norm::init(dim),
            attn: Attention::init(dim, rng),
            norm2: Norm::init(dim),
            mlp: Mlp::init(dim, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, heads: usize, key_mask: Option<&[bool]>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let h1 = self.norm1.forward(x)?;
        let (a, attn) = self.attn.forward(&h1, &h1, heads, key_mask)?;
        let x1 = x.add(&a)?;
        let h2 = self.norm2.forward(&x1)?;
        let (m, mlp) = self.mlp.forward(&h2)?;
        let x2 = x1.add(&m)?;
        Ok((
            x2,
            BlockCache {
                x: x.clone(),
                x1,
                attn,
                mlp,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
        let dh2 = self.mlp.backward(&cache.mlp, dout)?;
        let mut dx1 = self.norm2.backward(&cache.x1, &dh2)?;
        dx1.add_assign(dout)?;
        let (dq, dkv) = self.attn.backward(&cache.attn, &dx1)?;
        let dh1 = dq.add(&dkv)?;
        let mut dx = self.norm1.backward(&cache.x, &dh1)?;
        dx.add_assign(&dx1)?;
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams<T> {
    /// Patch projection, `(3·patch²) × D`, input order (channel, row, column).
    pub patch: Linear<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
}
module!(BackboneParams { patch, cls, pos, blocks, norm });

impl<T: Scalar> BackboneParams<T> {
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(BackboneParams {
            patch: Linear::init(3 * cfg.patch * cfg.patch, d, rng),
            cls: gaussian(&[d], crate::nn::INIT_SIGMA, rng),
            pos: gaussian(&[cfg.seq_len(), d], crate::nn::INIT_SIGMA, rng),
            blocks: (0..cfg.depth)
                .map(|_| Block::init(d, d * cfg.mlp_ratio, rng))
                .collect(),
            norm: Norm::init(d),
        })
    }
}

/// Observation points inside the block loop.
pub trait ForwardHook {
    /// Called before block `layer` (1-based) with the sequence length it sees.
    fn block_input(&mut self, _layer: usize, _seq_len: usize) {}

    /// When true, attention inside injected blocks ignores the prompt keys.
    fn mask_prompt_keys(&self) -> bool {
        false
    }
}

pub struct NoHook;
impl ForwardHook for NoHook {}

/// Records `(layer, seq_len)` for every block.
#[derive(Debug, Default, Clone)]
pub struct SeqLenRecorder {
    pub lens: Vec<(usize, usize)>,
    pub mask_prompts: bool,
}

impl SeqLenRecorder {
    pub fn peak(&self) -> usize {
        self.lens.iter().map(|&(_, n)| n).max().unwrap_or(0)
    }
}

impl ForwardHook for SeqLenRecorder {
    fn block_input(&mut self, layer: usize, seq_len: usize) {
        self.lens.push((layer, seq_len));
    }

    fn mask_prompt_keys(&self) -> bool {
        self.mask_prompts
    }
}

/// Patch projection, class token, and positional embeddings. `image`: B×3×H×W.
pub fn patch_embed<T: Scalar>(image: &Tensor<T>, cfg: &BackboneConfig, params: &BackboneParams<T>) -> Result<TokenSequence<T>> {
    cfg.validate()?;
    let [b, c, h, w] = *image.dims() else {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: image.dims().to_vec(),
            rhs: vec![3, cfg.image_h, cfg.image_w],
        });
    };
    if c != 3 || h != cfg.image_h || w != cfg.image_w {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: image.dims().to_vec(),
            rhs: vec![3, cfg.image_h, cfg.image_w],
        });
    }
    let p = cfg.patch;
    let (gh, gw) = cfg.grid();
    let np = gh * gw;
    let d = cfg.dim;
    let mut out = Vec::with_capacity(b * (np + 1) * d);
    for bi in 0..b {
        let img = &image.data()[bi * 3 * h * w..(bi + 1) * 3 * h * w];
        let patches = Tensor::from_fn(&[np, 3 * p * p], |idx| {
            let (pi, k) = (idx / (3 * p * p), idx % (3 * p * p));
            let (ch, ky, kx) = (k / (p * p), (k / p) % p, k % p);
            let (py, px) = (pi / gw, pi % gw);
            img[ch * h * w + (py * p + ky) * w + px * p + kx]
        });
        let tokens = params.patch.forward(&patches)?;
        let pos = params.pos.data();
        out.extend(params.cls.data().iter().zip(&pos[..d]).map(|(&c, &e)| c + e));
        out.extend(tokens.data().iter().zip(&pos[d..]).map(|(&t, &e)| t + e));
    }
    Ok(TokenSequence {
        data: Tensor::new(vec![b, np + 1, d], out)?,
        has_cls: true,
        prompts: 0,
    })
}

fn with_prompts<T: Scalar>(x: &Tensor<T>, prompts: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.dims()[0];
    concat_rows(&[&slice_rows(x, 0, 1), prompts, &slice_rows(x, 1, n)])
}

fn without_prompts<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let n = x.dims()[0];
    concat_rows(&[&slice_rows(x, 0, 1), &slice_rows(x, 1 + p, n)])
}

fn prompt_mask(p: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| i >= 1 && i < 1 + p).collect()
}

/// Runs blocks `from..=to` (1-based) on one sample's `N × D` tokens.
pub fn run_blocks<T: Scalar>(
    x: &Tensor<T>,
    prompts: Option<&Tensor<T>>,
    from: usize,
    to: usize,
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    hook: &mut dyn ForwardHook,
) -> Result<Tensor<T>> {
    let mut x = x.clone();
    for layer in from..=to {
        let block = &params.blocks[layer - 1];
        match prompts {
            Some(p) if cfg.is_injected(layer) => {
                let np = p.dims()[0];
                let xi = with_prompts(&x, p)?;
                hook.block_input(layer, xi.dims()[0]);
                let mask = hook.mask_prompt_keys().then(|| prompt_mask(np, xi.dims()[0]));
                let (y, _) = block.forward(&xi, cfg.heads, mask.as_deref())?;
                x = without_prompts(&y, np)?;
            }
            _ => {
                hook.block_input(layer, x.dims()[0]);
                x = block.forward(&x, cfg.heads, None)?.0;
            }
        }
    }
    Ok(x)
}

/// Block caches from [`run_blocks_cached`], enough to backpropagate into the input and prompts.
#[derive(Debug, Clone)]
pub struct BlocksCache<T> {
    from: usize,
    caches: Vec<(BlockCache<T>, usize)>,
}

pub fn run_blocks_cached<T: Scalar>(
    x: &Tensor<T>,
    prompts: &Tensor<T>,
    from: usize,
    to: usize,
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
) -> Result<(Tensor<T>, BlocksCache<T>)> {
    let mut x = x.clone();
    let mut caches = Vec::with_capacity(to + 1 - from);
    let np = prompts.dims()[0];
    for layer in from..=to {
        let block = &params.blocks[layer - 1];
        if cfg.is_injected(layer) {
            let (y, c) = block.forward(&with_prompts(&x, prompts)?, cfg.heads, None)?;
            x = without_prompts(&y, np)?;
            caches.push((c, np));
        } else {
            let (y, c) = block.forward(&x, cfg.heads, None)?;
            x = y;
            caches.push((c, 0));
        }
    }
    Ok((x, BlocksCache { from, caches }))
}

/// Returns `(d input, d prompts)`.
pub fn blocks_backward<T: Scalar>(
    cache: &BlocksCache<T>,
    dout: &Tensor<T>,
    params: &BackboneParams<T>,
    prompt_count: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = dout.last_dim();
    let mut dx = dout.clone();
    let mut dprompts = Tensor::zeros(&[prompt_count, d]);
    for (i, (c, np)) in cache.caches.iter().enumerate().rev() {
        let block = &params.blocks[cache.from + i - 1];
        if *np > 0 {
            let dfull = with_prompts(&dx, &Tensor::zeros(&[*np, d]))?;
            let din = block.backward(c, &dfull)?;
            let n = din.dims()[0];
            dprompts.add_assign(&slice_rows(&din, 1, 1 + np))?;
            dx = concat_rows(&[&slice_rows(&din, 0, 1), &slice_rows(&din, 1 + np, n)])?;
        } else {
            dx = block.backward(c, &dx)?;
        }
    }
    Ok((dx, dprompts))
}

/// Full block stack plus final norm over a batch.
pub fn forward_with_prompts<T: Scalar>(
    tokens: &TokenSequence<T>,
    prompts: Option<&PromptSet<T>>,
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    hook: &mut dyn ForwardHook,
) -> Result<TokenSequence<T>> {
    cfg.validate()?;
    if tokens.dim() != cfg.dim {
        return Err(Error::Shape {
            op: "forward_with_prompts",
            lhs: tokens.data.dims().to_vec(),
            rhs: vec![cfg.dim],
        });
    }
    if let Some(p) = prompts {
        if p.data.dims()[0] != tokens.batch() || p.data.dims()[2] != cfg.dim {
            return Err(Error::Shape {
                op: "forward_with_prompts",
                lhs: tokens.data.dims().to_vec(),
                rhs: p.data.dims().to_vec(),
            });
        }
    }
    let prompts = if cfg.inject_layers.is_empty() { None } else { prompts };
    let mut out = Vec::with_capacity(tokens.data.len());
    for b in 0..tokens.batch() {
        let p = prompts.map(|p| p.sample(b));
        let x = run_blocks(&tokens.sample(b), p.as_ref(), 1, cfg.depth, cfg, params, hook)?;
        out.extend(params.norm.forward(&x)?.into_data());
    }
    Ok(TokenSequence {
        data: Tensor::new(tokens.data.dims().to_vec(), out)?,
        has_cls: tokens.has_cls,
        prompts: 0,
    })
}
