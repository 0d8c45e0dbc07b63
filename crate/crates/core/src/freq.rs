//! Orthonormal 2-D DCT-II / DCT-III, the rectangular low-pass mask built on them, and a
//! DFT-based variant of the same filter kept for comparison runs.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::matmul_into;
use crate::numerics::{Scalar, Tensor};

/// Which frequency transform the event prompter filters with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Dct,
    Dft,
    None,
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dct" => Ok(Transform::Dct),
            "dft" => Ok(Transform::Dft),
            "none" => Ok(Transform::None),
            other => Err(Error::config(format!("unknown transform {other:?}"))),
        }
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transform::Dct => "dct",
            Transform::Dft => "dft",
            Transform::None => "none",
        })
    }
}

/// DCT-II coefficients of a `C × H × W` map; `(0, 0)` of each channel is the DC term.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMap<T> {
    pub coeffs: Tensor<T>,
}

/// Orthonormal DCT-II matrix: `m[k][i] = s_k cos(pi (2i + 1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

fn transposed(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j];
        }
    }
    t
}

fn cast_vec<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::c(x)).collect()
}

fn chw<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::Shape {
            op: "freq",
            lhs: x.dims().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Precomputed DCT bases for a fixed `H × W`.
#[derive(Debug, Clone)]
pub struct DctPlan<T> {
    h: usize,
    w: usize,
    ch: Vec<T>,
    ch_t: Vec<T>,
    cw: Vec<T>,
    cw_t: Vec<T>,
}

impl<T: Scalar> DctPlan<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let ch = dct_matrix(h);
        let cw = dct_matrix(w);
        DctPlan {
            h,
            w,
            ch_t: cast_vec(&transposed(&ch, h)),
            ch: cast_vec(&ch),
            cw_t: cast_vec(&transposed(&cw, w)),
            cw: cast_vec(&cw),
        }
    }

    // left (h×h) · x (h×w) · right (w×w)
    fn sandwich(&self, left: &[T], x: &[T], right: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![T::zero(); h * w];
        matmul_into(left, x, &mut tmp, h, h, w);
        let mut out = vec![T::zero(); h * w];
        matmul_into(&tmp, right, &mut out, h, w, w);
        out
    }

    fn per_channel(&self, x: &Tensor<T>, f: impl Fn(&[T]) -> Vec<T>) -> Result<Tensor<T>> {
        let (c, h, w) = chw(x)?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::Shape {
                op: "dct_plan",
                lhs: x.dims().to_vec(),
                rhs: vec![self.h, self.w],
            });
        }
        let mut out = Vec::with_capacity(c * h * w);
        for plane in x.data().chunks(h * w) {
            out.extend(f(plane));
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Forward transform along H then W.
    pub fn forward(&self, x: &Tensor<T>) -> Result<SpectralMap<T>> {
        let coeffs = self.per_channel(x, |p| self.sandwich(&self.ch, p, &self.cw_t))?;
        Ok(SpectralMap { coeffs })
    }

    /// Inverse transform (orthonormal DCT-III).
    pub fn inverse(&self, s: &SpectralMap<T>) -> Result<Tensor<T>> {
        self.per_channel(&s.coeffs, |p| self.sandwich(&self.ch_t, p, &self.cw))
    }

    /// Zeroes every coefficient outside the kept low-frequency rectangle, then inverts.
    pub fn lowpass(&self, x: &Tensor<T>, keep_fraction: f64) -> Result<Tensor<T>> {
        check_keep_fraction(keep_fraction)?;
        let (ku, kv) = (cutoff(keep_fraction, self.h), cutoff(keep_fraction, self.w));
        let mut s = self.forward(x)?;
        let (h, w) = (self.h, self.w);
        for plane in s.coeffs.data_mut().chunks_mut(h * w) {
            for u in 0..h {
                for v in 0..w {
                    if u >= ku || v >= kv {
                        plane[u * w + v] = T::zero();
                    }
                }
            }
        }
        self.inverse(&s)
    }
}

fn check_keep_fraction(keep_fraction: f64) -> Result<()> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!("keep_fraction must lie in (0, 1], got {keep_fraction}")));
    }
    Ok(())
}

/// Number of retained low-frequency indices along an axis of length `n`.
pub fn cutoff(keep_fraction: f64, n: usize) -> usize {
    ((keep_fraction * n as f64).ceil() as usize).clamp(1, n)
}

pub fn dct2d<T: Scalar>(x: &Tensor<T>) -> Result<SpectralMap<T>> {
    let (_, h, w) = chw(x)?;
    DctPlan::new(h, w).forward(x)
}

pub fn idct2d<T: Scalar>(s: &SpectralMap<T>) -> Result<Tensor<T>> {
    let (_, h, w) = chw(&s.coeffs)?;
    DctPlan::new(h, w).inverse(s)
}

pub fn lowpass_filter<T: Scalar>(x: &Tensor<T>, keep_fraction: f64) -> Result<Tensor<T>> {
    check_keep_fraction(keep_fraction)?;
    let (_, h, w) = chw(x)?;
    DctPlan::new(h, w).lowpass(x, keep_fraction)
}

/// Complex spectrum of a real `C × H × W` map under the unitary 2-D DFT.
#[derive(Debug, Clone)]
pub struct ComplexSpectrum<T> {
    pub dims: [usize; 3],
    pub data: Vec<Complex<T>>,
}

fn dft_matrix<T: Scalar>(n: usize, inverse: bool) -> Vec<Complex<T>> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = 1.0 / (n as f64).sqrt();
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        for i in 0..n {
            // reduce k*i mod n first so the angle stays small
            let phase = 2.0 * std::f64::consts::PI * ((k * i) % n) as f64 / n as f64;
            m.push(Complex::new(T::c(scale * phase.cos()), T::c(sign * scale * phase.sin())));
        }
    }
    m
}

fn cmatmul<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>], m: usize, k: usize, n: usize) -> Vec<Complex<T>> {
    let mut out = vec![Complex::new(T::zero(), T::zero()); m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + av * b[l * n + j];
            }
        }
    }
    out
}

/// Unitary 2-D DFT per channel. The DFT matrix is symmetric, so `F_H · X · F_W`.
pub fn dft2d<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (c, h, w) = chw(x)?;
    let (fh, fw) = (dft_matrix::<T>(h, false), dft_matrix::<T>(w, false));
    let mut data = Vec::with_capacity(c * h * w);
    for plane in x.data().chunks(h * w) {
        let xc: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
        let tmp = cmatmul(&fh, &xc, h, h, w);
        data.extend(cmatmul(&tmp, &fw, h, w, w));
    }
    Ok(ComplexSpectrum { dims: [c, h, w], data })
}

/// Inverse of [`dft2d`], keeping the real part.
pub fn idft2d<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    let [c, h, w] = s.dims;
    let (fh, fw) = (dft_matrix::<T>(h, true), dft_matrix::<T>(w, true));
    let mut out = Vec::with_capacity(c * h * w);
    for plane in s.data.chunks(h * w) {
        let tmp = cmatmul(&fh, plane, h, h, w);
        out.extend(cmatmul(&tmp, &fw, h, w, w).into_iter().map(|z| z.re));
    }
    Tensor::new(vec![c, h, w], out)
}

/// Low-pass filter in the DFT domain. Frequency `u` counts as `min(u, n - u)`; the kept
/// band is `ceil(keep_fraction · (n/2 + 1))` wide on each axis.
pub fn dft_lowpass_filter<T: Scalar>(x: &Tensor<T>, keep_fraction: f64) -> Result<Tensor<T>> {
    check_keep_fraction(keep_fraction)?;
    let mut s = dft2d(x)?;
    let [_, h, w] = s.dims;
    let (ku, kv) = (cutoff(keep_fraction, h / 2 + 1), cutoff(keep_fraction, w / 2 + 1));
    let zero = Complex::new(T::zero(), T::zero());
    for plane in s.data.chunks_mut(h * w) {
        for u in 0..h {
            let fu = u.min(h - u);
            for v in 0..w {
                let fv = v.min(w - v);
                if fu >= ku || fv >= kv {
                    plane[u * w + v] = zero;
                }
            }
        }
    }
    idft2d(&s)
}

/// Applies the configured frequency filter to a `C × H × W` map.
pub fn frequency_filter<T: Scalar>(x: &Tensor<T>, keep_fraction: f64, transform: Transform) -> Result<Tensor<T>> {
    match transform {
        Transform::Dct => lowpass_filter(x, keep_fraction),
        Transform::Dft => dft_lowpass_filter(x, keep_fraction),
        Transform::None => {
            check_keep_fraction(keep_fraction)?;
            Ok(x.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dct_1d(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                s * x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos())
                    .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn constant_map_has_dc_only() {
        let x = Tensor::full(&[1, 4, 4], 2.5f64);
        let s = dct2d(&x).unwrap();
        assert!((s.coeffs.data()[0] - 10.0).abs() < 1e-12);
        assert!(s.coeffs.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unit_row_matches_cosine_sum() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let s = dct2d(&x).unwrap();
        let expect = naive_dct_1d(&[1.0, 0.0, 0.0, 0.0]);
        for (a, b) in s.coeffs.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_and_dc_only_spectra_invert_as_expected() {
        let zero = SpectralMap {
            coeffs: Tensor::<f64>::zeros(&[2, 3, 5]),
        };
        assert!(idct2d(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        let mut dc = Tensor::<f64>::zeros(&[1, 4, 4]);
        dc.data_mut()[0] = 8.0;
        let x = idct2d(&SpectralMap { coeffs: dc }).unwrap();
        assert!(x.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn keep_fraction_out_of_range_is_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(matches!(lowpass_filter(&x, 0.0), Err(Error::Config(_))));
        assert!(matches!(lowpass_filter(&x, -1.0), Err(Error::Config(_))));
        assert!(matches!(lowpass_filter(&x, 1.5), Err(Error::Config(_))));
        assert!(matches!(dft_lowpass_filter(&x, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_input_survives_any_cutoff() {
        let x = Tensor::full(&[2, 6, 4], -1.25f64);
        for kf in [0.01, 0.3, 0.5, 1.0] {
            assert!(lowpass_filter(&x, kf).unwrap().max_abs_diff(&x) < 1e-12);
            assert!(dft_lowpass_filter(&x, kf).unwrap().max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn transform_parses() {
        assert_eq!("dft".parse::<Transform>().unwrap(), Transform::Dft);
        assert!("fft".parse::<Transform>().is_err());
    }
}
