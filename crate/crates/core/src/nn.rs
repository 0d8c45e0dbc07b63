//! Layer building blocks shared by the backbone, the prompter, and the fusion head:
//! parameter traversal, linear / LayerNorm / MLP layers, and multi-head attention,
//! each with an input-gradient backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::grad::{gelu_backward, layer_norm_backward, softmax_rows_backward};
use crate::numerics::{
    add_row_bias, gaussian, gelu, layer_norm, matmul, matmul_at, matmul_bt, Rng, Scalar, Tensor, LN_EPS,
};

/// Named parameter traversal. Names are dot-separated paths, e.g. `blocks.3.attn.q.w`.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Module<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(prefix.to_string(), self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Module`] for a struct whose listed fields are all modules.
macro_rules! module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::numerics::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::numerics::Tensor<T>),
            ) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::numerics::Tensor<T>),
            ) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use module;

/// Flat name → tensor map, the unit of checkpointing and precision casting.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

pub fn to_store<T: Scalar, M: Module<T>>(m: &M) -> ParamStore<T> {
    let mut store = BTreeMap::new();
    m.visit("", &mut |name, t| {
        store.insert(name, t.clone());
    });
    store
}

/// Overwrites every parameter of `m` from `store`. Names and shapes must match exactly.
pub fn load_store<T: Scalar, M: Module<T>>(m: &mut M, store: &ParamStore<T>) -> Result<()> {
    let mut err = None;
    let mut seen = 0usize;
    m.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match store.get(&name) {
            Some(src) if src.dims() == t.dims() => {
                *t = src.clone();
                seen += 1;
            }
            Some(src) => {
                err = Some(Error::Shape {
                    op: "load_params",
                    lhs: t.dims().to_vec(),
                    rhs: src.dims().to_vec(),
                })
            }
            None => err = Some(Error::data(format!("missing parameter {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != store.len() {
        return Err(Error::data(format!(
            "parameter store has {} tensors, model uses {seen}",
            store.len()
        )));
    }
    Ok(())
}

pub fn cast_store<T: Scalar, U: Scalar>(store: &ParamStore<T>) -> ParamStore<U> {
    store.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

/// Order-sensitive FNV-1a digest over parameter names and bit patterns.
pub fn checksum<T: Scalar, M: Module<T>>(m: &M) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    m.visit("", &mut |name, t| {
        eat(name.as_bytes());
        let mut buf = Vec::new();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        eat(&buf);
    });
    h
}

pub const INIT_SIGMA: f64 = 0.02;

/// `y = x·w + b` with `w` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}
module!(Linear { w, b });

impl<T: Scalar> Linear<T> {
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Linear {
            w: gaussian(&[inputs, outputs], INIT_SIGMA, rng),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = matmul(x, &self.w)?;
        add_row_bias(&mut y, &self.b)?;
        Ok(y)
    }

    pub fn backward_input(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_bt(dy, &self.w)
    }

    /// Gradients of `w` and `b` given the layer input and output gradient.
    pub fn backward_params(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let dw = matmul_at(x, dy)?;
        let n = dy.last_dim();
        let mut db = vec![T::zero(); n];
        for row in dy.data().chunks(n.max(1)) {
            for (a, &g) in db.iter_mut().zip(row) {
                *a = *a + g;
            }
        }
        Ok((dw, Tensor::new(vec![n], db)?))
    }
}

/// LayerNorm over the last axis.
#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}
module!(Norm { gain, shift });

impl<T: Scalar> Norm<T> {
    pub fn init(dim: usize) -> Self {
        Norm {
            gain: Tensor::full(&[dim], T::one()),
            shift: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gain, &self.shift, T::c(LN_EPS))
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm_backward(x, &self.gain, T::c(LN_EPS), dy)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
module!(Mlp { fc1, fc2 });

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pre: Tensor<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Mlp {
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(x)?;
        let act = pre.map(gelu);
        let y = self.fc2.forward(&act)?;
        Ok((y, MlpCache { pre }))
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dact = self.fc2.backward_input(dy)?;
        let dpre = gelu_backward(&cache.pre, &dact)?;
        self.fc1.backward_input(&dpre)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}
module!(Attention { q, k, v, o });

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    heads: usize,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionCache<T> {
    /// Attention weights of head `h`, `N_q × N_kv`.
    pub fn probs(&self, h: usize) -> &Tensor<T> {
        &self.probs[h]
    }
}

fn head_cols<T: Scalar>(x: &Tensor<T>, h: usize, dh: usize) -> Tensor<T> {
    let (n, d) = (x.dims()[0], x.dims()[1]);
    let data = x.data();
    Tensor::from_fn(&[n, dh], |i| data[(i / dh) * d + h * dh + i % dh])
}

fn put_head_cols<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, h: usize, dh: usize) {
    let d = dst.dims()[1];
    let out = dst.data_mut();
    for (i, &v) in src.data().iter().enumerate() {
        out[(i / dh) * d + h * dh + i % dh] = v;
    }
}

impl<T: Scalar> Attention<T> {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Attention {
            q: Linear::init(dim, dim, rng),
            k: Linear::init(dim, dim, rng),
            v: Linear::init(dim, dim, rng),
            o: Linear::init(dim, dim, rng),
        }
    }

    /// `xq`: N_q×D attends over `xkv`: N_kv×D. Keys with `key_mask[j] == true` get zero weight.
    pub fn forward(
        &self,
        xq: &Tensor<T>,
        xkv: &Tensor<T>,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let d = xq.last_dim();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!("dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let nq = xq.dims()[0];
        let q = self.q.forward(xq)?;
        let k = self.k.forward(xkv)?;
        let v = self.v.forward(xkv)?;
        let beta = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut ctx = Tensor::zeros(&[nq, d]);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = (head_cols(&q, h, dh), head_cols(&k, h, dh), head_cols(&v, h, dh));
            let mut scores = matmul_bt(&qh, &kh)?;
            if let Some(mask) = key_mask {
                let nk = mask.len();
                for row in scores.data_mut().chunks_mut(nk) {
                    for (s, &m) in row.iter_mut().zip(mask) {
                        if m {
                            *s = T::neg_infinity();
                        }
                    }
                }
            }
            let p = crate::numerics::softmax_rows(&scores, beta)?;
            put_head_cols(&mut ctx, &matmul(&p, &vh)?, h, dh);
            probs.push(p);
        }
        let out = self.o.forward(&ctx)?;
        Ok((
            out,
            AttentionCache {
                heads,
                q,
                k,
                v,
                probs,
            },
        ))
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, cache: &AttentionCache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let heads = cache.heads;
        let d = cache.q.last_dim();
        let dh = d / heads;
        let beta = T::one() / T::from_usize(dh).unwrap().sqrt();
        let dctx = self.o.backward_input(dout)?;
        let mut dq = Tensor::zeros(cache.q.dims());
        let mut dk = Tensor::zeros(cache.k.dims());
        let mut dv = Tensor::zeros(cache.v.dims());
        for h in 0..heads {
            let p = &cache.probs[h];
            let (qh, kh, vh) = (
                head_cols(&cache.q, h, dh),
                head_cols(&cache.k, h, dh),
                head_cols(&cache.v, h, dh),
            );
            let dctx_h = head_cols(&dctx, h, dh);
            let dp = matmul_bt(&dctx_h, &vh)?;
            put_head_cols(&mut dv, &matmul_at(p, &dctx_h)?, h, dh);
            let ds = softmax_rows_backward(p, &dp, beta)?;
            put_head_cols(&mut dq, &matmul(&ds, &kh)?, h, dh);
            put_head_cols(&mut dk, &matmul_at(&ds, &qh)?, h, dh);
        }
        let dxq = self.q.backward_input(&dq)?;
        let mut dxkv = self.k.backward_input(&dk)?;
        dxkv.add_assign(&self.v.backward_input(&dv)?)?;
        Ok((dxq, dxkv))
    }
}
