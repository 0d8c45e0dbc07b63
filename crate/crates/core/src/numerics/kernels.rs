use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Default LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

fn rank2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.dims() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Shape {
            op,
            lhs: t.dims().to_vec(),
            rhs: vec![],
        }),
    }
}

/// `C = A·B`. Each `C[i][j]` accumulates over the inner index in ascending order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Raw `out += a·b` over row-major slices (`a`: m×k, `b`: k×n, `out`: m×n).
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c = *c + av * bv;
            }
        }
    }
}

/// `A·Bᵀ` with `a`: m×k and `b`: n×k.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = rank2("matmul_bt", a)?;
    let (n, k2) = rank2("matmul_bt", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_bt",
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            let mut s = T::zero();
            for l in 0..k {
                s = s + ar[l] * br[l];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `Aᵀ·B` with `a`: k×m and `b`: k×n.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = rank2("matmul_at", a)?;
    let (k2, n) = rank2("matmul_at", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_at",
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for l in 0..k {
        let b_row = &bd[l * n..(l + 1) * n];
        for i in 0..m {
            let av = ad[l * m + i];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c = *c + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = rank2("transpose", a)?;
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

/// `x·w + b` for token rows `x`: N×in, `w`: in×out, `b`: out.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    add_row_bias(&mut y, b)?;
    Ok(y)
}

pub fn add_row_bias<T: Scalar>(y: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let n = y.last_dim();
    if b.len() != n {
        return Err(Error::Shape {
            op: "bias",
            lhs: y.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let bd = b.data();
    for row in y.data_mut().chunks_mut(n) {
        for (v, &bv) in row.iter_mut().zip(bd) {
            *v = *v + bv;
        }
    }
    Ok(())
}

/// Row-wise `softmax(beta·x)` with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    if !(beta > T::zero()) {
        return Err(Error::config(format!("softmax beta must be > 0, got {beta}")));
    }
    let n = x.last_dim();
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row, beta);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], beta: T) {
    let mut max = T::neg_infinity();
    for v in row.iter_mut() {
        *v = *v * beta;
        if *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// LayerNorm over the last axis (population variance).
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.len() != d || shift.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.dims().to_vec(),
            rhs: gain.dims().to_vec(),
        });
    }
    if !(eps > T::zero()) {
        return Err(Error::config("layer_norm eps must be > 0"));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    let (g, b) = (gain.data(), shift.data());
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * g[i] + b[i];
        }
    }
    Ok(out)
}

/// Output extent of a convolution along one axis (floor convention).
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// 2-D cross-correlation. `x`: C_in×H×W, `w`: C_out×C_in×k×k, `bias`: C_out.
///
/// Every output element starts from its bias and accumulates over
/// (input channel, kernel row, kernel column) in ascending order.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let shape_err = || Error::Shape {
        op: "conv2d",
        lhs: x.dims().to_vec(),
        rhs: w.dims().to_vec(),
    };
    let [c_in, h, wd] = *x.dims() else { return Err(shape_err()) };
    let [c_out, c_in2, kh, kw] = *w.dims() else { return Err(shape_err()) };
    if c_in != c_in2 || kh != kw || bias.len() != c_out {
        return Err(shape_err());
    }
    let k = kh;
    let (Some(ho), Some(wo)) = (
        conv_out_extent(h, k, stride, pad),
        conv_out_extent(wd, k, stride, pad),
    ) else {
        return Err(shape_err());
    };

    let (xd, wdat, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![T::zero(); c_out * ho * wo];
    for co in 0..c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..c_in {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((co * c_in + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            *o = *o + xrow[ix as usize] * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to [-1, 1]. Zero-norm inputs are rejected.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na2, nb2) = (dot(a, a), dot(b, b));
    if !(na2 > T::zero()) || !(nb2 > T::zero()) {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    // single sqrt of the product: exact whenever ‖a‖²‖b‖² is a perfect square
    let s = dot(a, b) / (na2 * nb2).sqrt();
    Ok(s.max(-T::one()).min(T::one()))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

/// d gelu / dx for the tanh approximation.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::c(3.0) * c * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

/// Mean over rows of an N×D matrix.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = rank2("mean_rows", x)?;
    if n == 0 {
        return Err(Error::Degenerate("mean over zero rows".into()));
    }
    let mut acc = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    Tensor::new(vec![d], acc.into_iter().map(|v| v * inv).collect())
}

/// Concatenates rank-2 tensors along the row axis.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let d = parts.first().map(|p| p.last_dim()).unwrap_or(0);
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (n, pd) = rank2("concat_rows", p)?;
        if pd != d {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: parts[0].dims().to_vec(),
                rhs: p.dims().to_vec(),
            });
        }
        rows += n;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, d], data)
}

/// Rows `start..end` of a rank-2 tensor.
pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let d = x.last_dim();
    Tensor::new(vec![end - start, d], x.data()[start * d..end * d].to_vec()).unwrap()
}
