//! Vector-Jacobian products for the kernels, with respect to their inputs only.

use crate::error::{Error, Result};

use super::kernels::gelu_grad;
use super::tensor::{Scalar, Tensor};

/// Backward of `y = softmax_rows(x, beta)` given the forward output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    if y.dims() != dy.dims() {
        return Err(Error::Shape {
            op: "softmax_backward",
            lhs: y.dims().to_vec(),
            rhs: dy.dims().to_vec(),
        });
    }
    let n = y.last_dim();
    let mut dx = dy.clone();
    if n == 0 {
        return Ok(dx);
    }
    for (dxr, yr) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let s = dxr.iter().zip(yr).fold(T::zero(), |s, (&g, &p)| s + g * p);
        for (g, &p) in dxr.iter_mut().zip(yr) {
            *g = beta * p * (*g - s);
        }
    }
    Ok(dx)
}

/// Backward of LayerNorm with respect to its input.
pub fn layer_norm_backward<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if dy.dims() != x.dims() || gain.len() != d {
        return Err(Error::Shape {
            op: "layer_norm_backward",
            lhs: x.dims().to_vec(),
            rhs: dy.dims().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(x.dims());
    if d == 0 {
        return Ok(dx);
    }
    let g = gain.data();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let rows = x.data().chunks(d).zip(dy.data().chunks(d));
    for ((xr, dyr), dxr) in rows.zip(dx.data_mut().chunks_mut(d)) {
        let mean = xr.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
        let var = xr.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            let xh = (xr[i] - mean) * inv_std;
            let gy = dyr[i] * g[i];
            m1 = m1 + gy;
            m2 = m2 + gy * xh;
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        for i in 0..d {
            let xh = (xr[i] - mean) * inv_std;
            dxr[i] = inv_std * (dyr[i] * g[i] - m1 - xh * m2);
        }
    }
    Ok(dx)
}

/// Backward of elementwise GELU given the pre-activation.
pub fn gelu_backward<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if pre.dims() != dy.dims() {
        return Err(Error::Shape {
            op: "gelu_backward",
            lhs: pre.dims().to_vec(),
            rhs: dy.dims().to_vec(),
        });
    }
    Tensor::new(
        pre.dims().to_vec(),
        pre.data()
            .iter()
            .zip(dy.data())
            .map(|(&x, &g)| g * gelu_grad(x))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::{layer_norm, softmax_rows, LN_EPS};

    fn probe(n: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(&[2, n], |i| ((i as f64 + seed) * 1.37).sin() * 2.0)
    }

    // Scalar objective: sum(dy ⊙ f(x)); its gradient is the VJP.
    fn fd_vjp(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64> {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.dims());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp: f64 = f(&xp).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&xm).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn softmax_vjp_matches_finite_differences() {
        let x = probe(5, 0.0);
        let dy = probe(5, 3.0);
        let beta = 0.7;
        let y = softmax_rows(&x, beta).unwrap();
        let an = softmax_rows_backward(&y, &dy, beta).unwrap();
        let fd = fd_vjp(|x| softmax_rows(x, beta).unwrap(), &x, &dy);
        assert!(an.max_abs_diff(&fd) < 1e-8);
    }

    #[test]
    fn layer_norm_vjp_matches_finite_differences() {
        let x = probe(6, 1.0);
        let dy = probe(6, 5.0);
        let g = Tensor::from_fn(&[6], |i| 0.5 + i as f64 * 0.1);
        let b = Tensor::from_fn(&[6], |i| i as f64 * -0.2);
        let an = layer_norm_backward(&x, &g, LN_EPS, &dy).unwrap();
        let fd = fd_vjp(|x| layer_norm(x, &g, &b, LN_EPS).unwrap(), &x, &dy);
        assert!(an.max_abs_diff(&fd) < 1e-7);
    }
}
