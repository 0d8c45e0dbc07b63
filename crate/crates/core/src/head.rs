//! Bidirectional cross-attention between the RGB and event token streams, then global
//! average pooling over both streams and a linear attribute classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{module, Attention, AttentionCache, Linear, Mlp, MlpCache, Norm};
use crate::numerics::{concat_rows, mean_rows, Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("fusion dim {dim} not divisible by {} heads", self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("fusion mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// One direction of a cross-attention layer: the query stream attends over the other one.
#[derive(Debug, Clone)]
pub struct CrossBlock<T> {
    pub norm_q: Norm<T>,
    pub norm_kv: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub mlp: Mlp<T>,
}
module!(CrossBlock { norm_q, norm_kv, attn, norm2, mlp });

#[derive(Debug, Clone)]
pub struct CrossBlockCache<T> {
    xq: Tensor<T>,
    xkv: Tensor<T>,
    attn: AttentionCache<T>,
    mid: Tensor<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> CrossBlock<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        CrossBlock {
            norm_q: Norm::init(dim),
            norm_kv: Norm::init(dim),
            attn: Attention::init(dim, rng),
            norm2: Norm::init(dim),
            mlp: Mlp::init(dim, hidden, rng),
        }
    }

    pub fn forward(&self, xq: &Tensor<T>, xkv: &Tensor<T>, heads: usize) -> Result<(Tensor<T>, CrossBlockCache<T>)> {
        let (a, attn) = self
            .attn
            .forward(&self.norm_q.forward(xq)?, &self.norm_kv.forward(xkv)?, heads, None)?;
        let mid = xq.add(&a)?;
        let (m, mlp) = self.mlp.forward(&self.norm2.forward(&mid)?)?;
        let out = mid.add(&m)?;
        Ok((
            out,
            CrossBlockCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                attn,
                mid,
                mlp,
            },
        ))
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, cache: &CrossBlockCache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let dn2 = self.mlp.backward(&cache.mlp, dout)?;
        let mut dmid = self.norm2.backward(&cache.mid, &dn2)?;
        dmid.add_assign(dout)?;
        let (dqn, dkvn) = self.attn.backward(&cache.attn, &dmid)?;
        let mut dxq = self.norm_q.backward(&cache.xq, &dqn)?;
        dxq.add_assign(&dmid)?;
        let dxkv = self.norm_kv.backward(&cache.xkv, &dkvn)?;
        Ok((dxq, dxkv))
    }
}

#[derive(Debug, Clone)]
pub struct CrossLayer<T> {
    /// RGB queries over event keys/values.
    pub rgb: CrossBlock<T>,
    /// Event queries over RGB keys/values.
    pub evt: CrossBlock<T>,
}
module!(CrossLayer { rgb, evt });

#[derive(Debug, Clone)]
pub struct HeadParams<T> {
    pub layers: Vec<CrossLayer<T>>,
    /// `W_cls` (`D × A`) and `b_cls` (`A`).
    pub cls: Linear<T>,
}
module!(HeadParams { layers, cls });

impl<T: Scalar> HeadParams<T> {
    pub fn init(cfg: &HeadConfig, dim: usize, attributes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate(dim)?;
        Ok(HeadParams {
            layers: (0..cfg.layers)
                .map(|_| CrossLayer {
                    rgb: CrossBlock::init(dim, dim * cfg.mlp_ratio, rng),
                    evt: CrossBlock::init(dim, dim * cfg.mlp_ratio, rng),
                })
                .collect(),
            cls: Linear::init(dim, attributes, rng),
        })
    }

    pub fn attributes(&self) -> usize {
        self.cls.b.len()
    }
}

#[derive(Debug, Clone)]
pub struct CrossCache<T> {
    layers: Vec<(CrossBlockCache<T>, CrossBlockCache<T>)>,
}

/// Cross-attention for one sample. Both directions of a layer read that layer's input states.
pub fn cross_attend<T: Scalar>(
    x_rgb: &Tensor<T>,
    x_evt: &Tensor<T>,
    params: &HeadParams<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (r, e, _) = cross_attend_cached(x_rgb, x_evt, params, heads)?;
    Ok((r, e))
}

pub fn cross_attend_cached<T: Scalar>(
    x_rgb: &Tensor<T>,
    x_evt: &Tensor<T>,
    params: &HeadParams<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>, CrossCache<T>)> {
    let (mut r, mut e) = (x_rgb.clone(), x_evt.clone());
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (nr, cr) = layer.rgb.forward(&r, &e, heads)?;
        let (ne, ce) = layer.evt.forward(&e, &r, heads)?;
        r = nr;
        e = ne;
        layers.push((cr, ce));
    }
    Ok((r, e, CrossCache { layers }))
}

pub fn cross_attend_backward<T: Scalar>(
    cache: &CrossCache<T>,
    params: &HeadParams<T>,
    d_rgb: &Tensor<T>,
    d_evt: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut dr, mut de) = (d_rgb.clone(), d_evt.clone());
    for (layer, (cr, ce)) in params.layers.iter().zip(&cache.layers).rev() {
        let (dr_q, de_kv) = layer.rgb.backward(cr, &dr)?;
        let (de_q, dr_kv) = layer.evt.backward(ce, &de)?;
        dr = dr_q.add(&dr_kv)?;
        de = de_q.add(&de_kv)?;
    }
    Ok((dr, de))
}

/// Mean over the concatenated token rows of both streams.
pub fn pooled_features<T: Scalar>(x_rgb: &Tensor<T>, x_evt: &Tensor<T>) -> Result<Tensor<T>> {
    mean_rows(&concat_rows(&[x_rgb, x_evt])?)
}

/// Logits for one sample, length `A`.
pub fn classify_sample<T: Scalar>(x_rgb: &Tensor<T>, x_evt: &Tensor<T>, cls: &Linear<T>) -> Result<Tensor<T>> {
    let f = pooled_features(x_rgb, x_evt)?;
    let d = f.len();
    cls.forward(&f.reshape(&[1, d])?)?.reshape(&[cls.b.len()])
}

/// Batched classifier over `B × N × D` and `B × N_e × D` streams, returning `B × A` logits.
pub fn classify<T: Scalar>(x_rgb: &Tensor<T>, x_evt: &Tensor<T>, cls: &Linear<T>) -> Result<Tensor<T>> {
    let b = x_rgb.dims()[0];
    if x_evt.dims()[0] != b {
        return Err(Error::Shape {
            op: "classify",
            lhs: x_rgb.dims().to_vec(),
            rhs: x_evt.dims().to_vec(),
        });
    }
    let a = cls.b.len();
    let mut out = Vec::with_capacity(b * a);
    for i in 0..b {
        out.extend(classify_sample(&x_rgb.slice0(i), &x_evt.slice0(i), cls)?.into_data());
    }
    Tensor::new(vec![b, a], out)
}
