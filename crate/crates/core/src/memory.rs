//! Hopfield-style memories: a learned internal prototype layer applied per token, an
//! offline K-means prototype bank queried by softmax retrieval, and the
//! similarity gate that mixes the two modalities' retrieved memories.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{module, INIT_SIGMA};
use crate::numerics::grad::softmax_rows_backward;
use crate::numerics::{cosine_sim, evt1, gaussian, matmul, matmul_bt, seeded_rng, softmax_rows, Rng, Scalar, Tensor};

/// Which retrieved memories take part in the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modalities {
    Rgb,
    Event,
    Both,
    None,
}

impl Modalities {
    pub fn rgb(self) -> bool {
        matches!(self, Modalities::Rgb | Modalities::Both)
    }

    pub fn event(self) -> bool {
        matches!(self, Modalities::Event | Modalities::Both)
    }
}

impl FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modalities::Rgb),
            "event" => Ok(Modalities::Event),
            "both" => Ok(Modalities::Both),
            "none" => Ok(Modalities::None),
            other => Err(Error::config(format!("unknown modalities {other:?}"))),
        }
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modalities::Rgb => "rgb",
            Modalities::Event => "event",
            Modalities::Both => "both",
            Modalities::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Bank centers per attribute.
    pub k: usize,
    /// Internal prototype count.
    pub prototypes: usize,
    /// Softmax temperature; `None` means `1/√D`.
    pub beta: Option<f64>,
    pub dropout: f64,
    pub modalities: Modalities,
    pub kmeans_iters: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            k: 100,
            prototypes: 64,
            beta: None,
            dropout: 0.0,
            modalities: Modalities::Both,
            kmeans_iters: 100,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.prototypes == 0 {
            return Err(Error::config("memory k and prototypes must be positive"));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config(format!("memory beta must be > 0, got {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn beta_for(&self, dim: usize) -> f64 {
        self.beta.unwrap_or(1.0 / (dim as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct InternalMemoryParams<T> {
    /// `D × M`
    pub w_lookup: Tensor<T>,
    /// `M × D`
    pub w_content: Tensor<T>,
}
module!(InternalMemoryParams { w_lookup, w_content });

impl<T: Scalar> InternalMemoryParams<T> {
    pub fn init(dim: usize, prototypes: usize, rng: &mut Rng) -> Self {
        InternalMemoryParams {
            w_lookup: gaussian(&[dim, prototypes], 1.0, rng),
            w_content: gaussian(&[prototypes, dim], INIT_SIGMA, rng),
        }
    }
}

/// Dropout applied to the retrieved content before the residual add.
#[derive(Debug, Clone)]
pub enum Dropout {
    Disabled,
    /// Inverted dropout with a mask drawn from `seed`.
    Seeded { rate: f64, seed: u64 },
    /// Explicit keep mask over the `N × D` content, kept values scaled by `scale`.
    Mask { keep: Vec<bool>, scale: f64 },
}

impl Dropout {
    fn mask(&self, len: usize) -> Option<(Vec<bool>, f64)> {
        match self {
            Dropout::Disabled => None,
            Dropout::Seeded { rate, .. } if *rate == 0.0 => None,
            Dropout::Seeded { rate, seed } => {
                let mut rng = seeded_rng(*seed);
                let keep = (0..len).map(|_| rng.random::<f64>() >= *rate).collect();
                Some((keep, 1.0 / (1.0 - rate)))
            }
            Dropout::Mask { keep, scale } => Some((keep.clone(), *scale)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnhanceCache<T> {
    probs: Tensor<T>,
    mask: Option<(Vec<bool>, f64)>,
}

/// `X' = X + Dropout(softmax(β·X·W_lookup)·W_content)` for one sample's `N × D` tokens.
pub fn internal_enhance<T: Scalar>(
    x: &Tensor<T>,
    params: &InternalMemoryParams<T>,
    beta: T,
    dropout: &Dropout,
) -> Result<Tensor<T>> {
    Ok(internal_enhance_cached(x, params, beta, dropout)?.0)
}

pub fn internal_enhance_cached<T: Scalar>(
    x: &Tensor<T>,
    params: &InternalMemoryParams<T>,
    beta: T,
    dropout: &Dropout,
) -> Result<(Tensor<T>, EnhanceCache<T>)> {
    let probs = softmax_rows(&matmul(x, &params.w_lookup)?, beta)?;
    let mut content = matmul(&probs, &params.w_content)?;
    if content.dims() != x.dims() {
        return Err(Error::Shape {
            op: "internal_enhance",
            lhs: x.dims().to_vec(),
            rhs: content.dims().to_vec(),
        });
    }
    let mask = dropout.mask(content.len());
    if let Some((keep, scale)) = &mask {
        if keep.len() != content.len() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: content.dims().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let s = T::c(*scale);
        for (v, &k) in content.data_mut().iter_mut().zip(keep) {
            *v = if k { *v * s } else { T::zero() };
        }
    }
    let out = x.add(&content)?;
    Ok((out, EnhanceCache { probs, mask }))
}

pub fn internal_enhance_backward<T: Scalar>(
    cache: &EnhanceCache<T>,
    params: &InternalMemoryParams<T>,
    beta: T,
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dcontent = dout.clone();
    if let Some((keep, scale)) = &cache.mask {
        let s = T::c(*scale);
        for (g, &k) in dcontent.data_mut().iter_mut().zip(keep) {
            *g = if k { *g * s } else { T::zero() };
        }
    }
    let dprobs = matmul_bt(&dcontent, &params.w_content)?;
    let dscores = softmax_rows_backward(&cache.probs, &dprobs, beta)?;
    let mut dx = matmul_bt(&dscores, &params.w_lookup)?;
    dx.add_assign(dout)?;
    Ok(dx)
}

/// `softmax(β·Q·Kᵀ)·V` with `K = V = prototypes`. `q`: B×D, `prototypes`: R×D.
pub fn external_retrieve<T: Scalar>(q: &Tensor<T>, prototypes: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    Ok(external_retrieve_cached(q, prototypes, beta)?.0)
}

pub fn external_retrieve_cached<T: Scalar>(
    q: &Tensor<T>,
    prototypes: &Tensor<T>,
    beta: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if prototypes.dims().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Degenerate("retrieval from an empty memory bank".into()));
    }
    let probs = softmax_rows(&matmul_bt(q, prototypes)?, beta)?;
    Ok((matmul(&probs, prototypes)?, probs))
}

/// Gradient of the retrieval with respect to the query, given the softmax weights.
pub fn external_retrieve_backward<T: Scalar>(
    probs: &Tensor<T>,
    prototypes: &Tensor<T>,
    beta: T,
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dprobs = matmul_bt(dout, prototypes)?;
    let dscores = softmax_rows_backward(probs, &dprobs, beta)?;
    matmul(&dscores, prototypes)
}

/// `α = (1 + cos(m_rgb, m_evt)) / 2`, or 0.5 when either vector has zero norm.
pub fn gate<T: Scalar>(m_rgb: &[T], m_evt: &[T]) -> T {
    match cosine_sim(m_rgb, m_evt) {
        Ok(s) => (T::one() + s) * T::c(0.5),
        Err(_) => {
            log::warn!("zero-norm retrieved memory, using neutral gate 0.5");
            T::c(0.5)
        }
    }
}

/// Per-row memory deltas `(Δ_rgb, Δ_evt)` for gate value `alpha`.
pub fn infusion_deltas<T: Scalar>(m_rgb: &[T], m_evt: &[T], alpha: T) -> (Vec<T>, Vec<T>) {
    let mut dr = Vec::with_capacity(m_rgb.len());
    let mut de = Vec::with_capacity(m_rgb.len());
    for (&r, &e) in m_rgb.iter().zip(m_evt) {
        let mix = alpha * (r - e);
        dr.push(e + mix);
        de.push(r - mix);
    }
    (dr, de)
}

fn add_to_rows<T: Scalar>(x: &Tensor<T>, delta: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    let d = delta.len();
    if d > 0 {
        for row in out.data_mut().chunks_mut(d) {
            for (v, &m) in row.iter_mut().zip(delta) {
                *v = *v + m;
            }
        }
    }
    out
}

/// One sample: `x_rgb` N×D, `x_evt` N_e×D, memories of length D. Returns the updated streams and α.
pub fn infuse_sample<T: Scalar>(
    x_rgb: &Tensor<T>,
    x_evt: &Tensor<T>,
    m_rgb: &[T],
    m_evt: &[T],
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let d = m_rgb.len();
    if m_evt.len() != d || x_rgb.last_dim() != d || x_evt.last_dim() != d {
        return Err(Error::Shape {
            op: "gated_infusion",
            lhs: x_rgb.dims().to_vec(),
            rhs: x_evt.dims().to_vec(),
        });
    }
    let alpha = gate(m_rgb, m_evt);
    let (dr, de) = infusion_deltas(m_rgb, m_evt, alpha);
    Ok((add_to_rows(x_rgb, &dr), add_to_rows(x_evt, &de), alpha))
}

/// Batched infusion over `B × N × D` / `B × N_e × D` streams and `B × D` memories.
pub fn gated_infusion<T: Scalar>(
    x_rgb: &Tensor<T>,
    x_evt: &Tensor<T>,
    m_rgb: &Tensor<T>,
    m_evt: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let b = x_rgb.dims()[0];
    if x_evt.dims()[0] != b || m_rgb.dims() != m_evt.dims() || m_rgb.dims()[0] != b {
        return Err(Error::Shape {
            op: "gated_infusion",
            lhs: x_rgb.dims().to_vec(),
            rhs: m_rgb.dims().to_vec(),
        });
    }
    let (mut out_r, mut out_e, mut alphas) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..b {
        let (r, e, a) = infuse_sample(&x_rgb.slice0(i), &x_evt.slice0(i), m_rgb.row(i), m_evt.row(i))?;
        out_r.extend(r.into_data());
        out_e.extend(e.into_data());
        alphas.push(a);
    }
    Ok((
        Tensor::new(x_rgb.dims().to_vec(), out_r)?,
        Tensor::new(x_evt.dims().to_vec(), out_e)?,
        Tensor::new(vec![b], alphas)?,
    ))
}

/// Gradients of one sample's infusion with respect to `(m_rgb, m_evt)`. Token gradients pass
/// through unchanged, so only the per-stream column sums of the output gradients are needed.
pub fn infusion_backward<T: Scalar>(m_rgb: &[T], m_evt: &[T], d_rgb_sum: &[T], d_evt_sum: &[T]) -> (Vec<T>, Vec<T>) {
    let d = m_rgb.len();
    let alpha = gate(m_rgb, m_evt);
    let one_m = T::one() - alpha;
    let mut gr: Vec<T> = (0..d).map(|i| alpha * d_rgb_sum[i] + one_m * d_evt_sum[i]).collect();
    let mut ge: Vec<T> = (0..d).map(|i| one_m * d_rgb_sum[i] + alpha * d_evt_sum[i]).collect();
    let nr2 = m_rgb.iter().fold(T::zero(), |s, &v| s + v * v);
    let ne2 = m_evt.iter().fold(T::zero(), |s, &v| s + v * v);
    if nr2 > T::zero() && ne2 > T::zero() {
        let dalpha = (0..d).fold(T::zero(), |s, i| s + (d_rgb_sum[i] - d_evt_sum[i]) * (m_rgb[i] - m_evt[i]));
        let ds = dalpha * T::c(0.5);
        let s = cosine_sim(m_rgb, m_evt).unwrap_or(T::zero());
        let inv = T::one() / (nr2 * ne2).sqrt();
        for i in 0..d {
            gr[i] = gr[i] + ds * (m_evt[i] * inv - s * m_rgb[i] / nr2);
            ge[i] = ge[i] + ds * (m_rgb[i] * inv - s * m_evt[i] / ne2);
        }
    }
    (gr, ge)
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y))
}

/// Lloyd's algorithm with k-means++ seeding. `points`: n×D → k×D centroids.
pub fn kmeans<T: Scalar>(points: &Tensor<T>, k: usize, max_iters: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let [n, d] = *points.dims() else {
        return Err(Error::Shape {
            op: "kmeans",
            lhs: points.dims().to_vec(),
            rhs: vec![],
        });
    };
    if k == 0 || n < k {
        return Err(Error::config(format!("kmeans needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut centroids: Vec<Vec<T>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.random_range(0..n)).to_vec());
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), &centroids[0]).to_f64_lossy())
        .collect();
    while centroids.len() < k {
        let pick = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        let c = points.row(pick).to_vec();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(points.row(i), &c).to_f64_lossy());
        }
        centroids.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let p = points.row(i);
            let mut best = (0, sq_dist(p, &centroids[0]));
            for (c, cen) in centroids.iter().enumerate().skip(1) {
                let dist = sq_dist(p, cen);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            if *a != best.0 {
                *a = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![T::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(points.row(i)) {
                *s = *s + v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::one() / T::from_usize(counts[c]).unwrap();
                centroids[c] = sums[c].iter().map(|&s| s * inv).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its own centroid
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(points.row(i), &centroids[assign[i]]);
                        let dj = sq_dist(points.row(j), &centroids[assign[j]]);
                        di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[c] = points.row(far).to_vec();
                assign[far] = c;
            }
        }
    }
    Tensor::new(vec![k, d], centroids.concat())
}

/// Per-modality prototype matrices, `(A·k) × D`, attribute `j` in rows `j·k..(j+1)·k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    k: usize,
    attributes: Vec<String>,
    seed: u64,
    rgb: Tensor<T>,
    event: Tensor<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    attributes: usize,
    k: usize,
    dim: usize,
    modalities: Vec<String>,
    attribute_names: Vec<String>,
    seed: u64,
    checksum: String,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(k: usize, attributes: Vec<String>, seed: u64, rgb: Tensor<T>, event: Tensor<T>) -> Result<Self> {
        let rows = attributes.len() * k;
        if rgb.rank() != 2 || rgb.dims() != event.dims() || rgb.dims()[0] != rows {
            return Err(Error::Shape {
                op: "memory_bank",
                lhs: rgb.dims().to_vec(),
                rhs: event.dims().to_vec(),
            });
        }
        if !rgb.all_finite() || !event.all_finite() {
            return Err(Error::data("memory bank contains non-finite values"));
        }
        Ok(MemoryBank {
            k,
            attributes,
            seed,
            rgb,
            event,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn dim(&self) -> usize {
        self.rgb.last_dim()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rgb(&self) -> &Tensor<T> {
        &self.rgb
    }

    pub fn event(&self) -> &Tensor<T> {
        &self.event
    }

    pub fn attribute_rows(&self, attribute: usize) -> Range<usize> {
        attribute * self.k..(attribute + 1) * self.k
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::nn::checksum(&self.rgb);
        h ^= crate::nn::checksum(&self.event).rotate_left(1);
        h
    }

    pub fn cast<U: Scalar>(&self) -> MemoryBank<U> {
        MemoryBank {
            k: self.k,
            attributes: self.attributes.clone(),
            seed: self.seed,
            rgb: self.rgb.cast(),
            event: self.event.cast(),
        }
    }

    /// Writes `manifest.json`, `rgb.evt`, and `event.evt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = BankManifest {
            attributes: self.attributes.len(),
            k: self.k,
            dim: self.dim(),
            modalities: vec!["rgb".into(), "event".into()],
            attribute_names: self.attributes.clone(),
            seed: self.seed,
            checksum: format!("{:016x}", self.checksum()),
        };
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        evt1::write_file(dir.join("rgb.evt"), &self.rgb)?;
        evt1::write_file(dir.join("event.evt"), &self.event)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: BankManifest = serde_json::from_str(&text)?;
        if m.attribute_names.len() != m.attributes {
            return Err(Error::data("bank manifest attribute count mismatch"));
        }
        let bank = MemoryBank::new(
            m.k,
            m.attribute_names,
            m.seed,
            evt1::read_file(dir.join("rgb.evt"))?,
            evt1::read_file(dir.join("event.evt"))?,
        )?;
        if bank.dim() != m.dim {
            return Err(Error::data(format!("bank dim {} but manifest says {}", bank.dim(), m.dim)));
        }
        Ok(bank)
    }
}

/// Builds the bank from per-sample features (`n × D` per modality) and binary labels (`n × A`).
pub fn build_memory_bank<T: Scalar>(
    features_rgb: &Tensor<T>,
    features_evt: &Tensor<T>,
    labels: &Tensor<T>,
    attribute_names: &[String],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<MemoryBank<T>> {
    let [n, d] = *features_rgb.dims() else {
        return Err(Error::Shape {
            op: "build_memory_bank",
            lhs: features_rgb.dims().to_vec(),
            rhs: vec![],
        });
    };
    if features_evt.dims() != features_rgb.dims() || labels.rank() != 2 || labels.dims()[0] != n {
        return Err(Error::Shape {
            op: "build_memory_bank",
            lhs: features_rgb.dims().to_vec(),
            rhs: labels.dims().to_vec(),
        });
    }
    let a = labels.dims()[1];
    if attribute_names.len() != a {
        return Err(Error::config(format!("{} attribute names for {a} label columns", attribute_names.len())));
    }
    if k == 0 || n < k {
        return Err(Error::config(format!("bank needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if labels.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    let mut rng = seeded_rng(seed);
    let mut rgb = Vec::with_capacity(a * k * d);
    let mut evt = Vec::with_capacity(a * k * d);
    for j in 0..a {
        let pos: Vec<usize> = (0..n).filter(|&i| labels.row(i)[j] == T::one()).collect();
        if pos.is_empty() {
            log::warn!("attribute {j} ({}) has no positives, using the global mean", attribute_names[j]);
            let mr = crate::numerics::mean_rows(features_rgb)?;
            let me = crate::numerics::mean_rows(features_evt)?;
            for _ in 0..k {
                rgb.extend_from_slice(mr.data());
                evt.extend_from_slice(me.data());
            }
            continue;
        }
        // weights exp(1 − r_j) are equal inside one attribute's pool: uniform resampling
        let size = pos.len().max(4 * k);
        let picks: Vec<usize> = (0..size).map(|_| pos[rng.random_range(0..pos.len())]).collect();
        for (src, dst) in [(features_rgb, &mut rgb), (features_evt, &mut evt)] {
            let pool = Tensor::new(vec![size, d], picks.iter().flat_map(|&i| src.row(i).to_vec()).collect())?;
            let mut sub = seeded_rng(rng.next_u64());
            dst.extend(kmeans(&pool, k, max_iters, &mut sub)?.into_data());
        }
    }
    MemoryBank::new(
        k,
        attribute_names.to_vec(),
        seed,
        Tensor::new(vec![a * k, d], rgb)?,
        Tensor::new(vec![a * k, d], evt)?,
    )
}
