//! Dense tensor kernels shared by every stage of the pipeline.

pub mod evt1;
pub mod grad;
pub mod kernels;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use kernels::{
    add_row_bias, concat_rows, conv2d, cosine_sim, dot, gelu, layer_norm, linear, matmul, matmul_at, matmul_bt,
    mean_rows, slice_rows, softmax_rows, transpose, LN_EPS,
};
pub use tensor::{DType, Scalar, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor of N(0, sigma²) samples drawn in f64 and rounded to `T`.
pub fn gaussian<T: Scalar>(dims: &[usize], sigma: f64, rng: &mut Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    Tensor::from_fn(dims, |_| T::c(normal.sample(rng)))
}
