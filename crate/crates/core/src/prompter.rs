//! Event prompter: event frames → conv stem → frequency filter → patch tokens →
//! mean over frames → `P` prompt tokens via a learned token-mixing matrix.

use serde::{Deserialize, Serialize};

use crate::backbone::PromptSet;
use crate::error::{Error, Result};
use crate::freq::{dft_lowpass_filter, DctPlan, Transform};
use crate::nn::{module, Linear, INIT_SIGMA};
use crate::numerics::{conv2d, gaussian, gelu, matmul, Rng, Scalar, Tensor};

/// Width of the first stem layer.
pub const STEM_HIDDEN: usize = 16;
/// Patch size of the event tokenizer on the `H/4 × W/4` maps.
pub const TOKEN_PATCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrompterConfig {
    pub prompt_count: usize,
    pub keep_fraction: f64,
    pub transform: Transform,
    pub inject_layers: Vec<usize>,
    pub stem_channels: usize,
}

impl Default for PrompterConfig {
    fn default() -> Self {
        PrompterConfig {
            prompt_count: 8,
            keep_fraction: 0.5,
            transform: Transform::Dct,
            inject_layers: vec![6, 8],
            stem_channels: 32,
        }
    }
}

impl PrompterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::config("stem_channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PrompterParams<T> {
    pub stem1_w: Tensor<T>,
    pub stem1_b: Tensor<T>,
    pub stem2_w: Tensor<T>,
    pub stem2_b: Tensor<T>,
    /// Patch embedding of the filtered maps, `(C_s·4·4) × D`.
    pub tokenizer: Linear<T>,
    /// Token-mixing projection, `P × N_p`.
    pub proj: Tensor<T>,
}
module!(PrompterParams { stem1_w, stem1_b, stem2_w, stem2_b, tokenizer, proj });

impl<T: Scalar> PrompterParams<T> {
    pub fn init(cfg: &PrompterConfig, dim: usize, num_patches: usize, rng: &mut Rng) -> Self {
        let cs = cfg.stem_channels;
        PrompterParams {
            stem1_w: gaussian(&[STEM_HIDDEN, 3, 3, 3], INIT_SIGMA, rng),
            stem1_b: Tensor::zeros(&[STEM_HIDDEN]),
            stem2_w: gaussian(&[cs, STEM_HIDDEN, 3, 3], INIT_SIGMA, rng),
            stem2_b: Tensor::zeros(&[cs]),
            tokenizer: Linear::init(cs * TOKEN_PATCH * TOKEN_PATCH, dim, rng),
            proj: gaussian(&[cfg.prompt_count, num_patches], INIT_SIGMA, rng),
        }
    }

    pub fn prompt_count(&self) -> usize {
        self.proj.dims()[0]
    }
}

/// Two stride-2 3×3 convolutions with GELU. `frames`: n×3×H×W → n×C_s×H/4×W/4.
pub fn conv_stem<T: Scalar>(frames: &Tensor<T>, params: &PrompterParams<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *frames.dims() else {
        return Err(Error::Shape {
            op: "conv_stem",
            lhs: frames.dims().to_vec(),
            rhs: vec![3],
        });
    };
    if c != 3 {
        return Err(Error::Shape {
            op: "conv_stem",
            lhs: frames.dims().to_vec(),
            rhs: vec![3],
        });
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!("event frames {h}x{w} not divisible by 4")));
    }
    let mut out = Vec::new();
    let mut dims = vec![n];
    for i in 0..n {
        let x = frames.slice0(i);
        let y = conv2d(&x, &params.stem1_w, &params.stem1_b, 2, 1)?.map(gelu);
        let y = conv2d(&y, &params.stem2_w, &params.stem2_b, 2, 1)?.map(gelu);
        if i == 0 {
            dims.extend_from_slice(y.dims());
        }
        out.extend(y.into_data());
    }
    if n == 0 {
        dims.extend_from_slice(&[params.stem2_b.len(), h / 4, w / 4]);
    }
    Tensor::new(dims, out)
}

/// Splits each `C × h × w` map into 4×4 patches and embeds them. Returns `N_p × D`.
fn tokenize<T: Scalar>(map: &Tensor<T>, params: &PrompterParams<T>) -> Result<Tensor<T>> {
    let [c, h, w] = *map.dims() else { unreachable!() };
    let p = TOKEN_PATCH;
    let (gh, gw) = (h / p, w / p);
    let d = map.data();
    let patches = Tensor::from_fn(&[gh * gw, c * p * p], |idx| {
        let (pi, k) = (idx / (c * p * p), idx % (c * p * p));
        let (ch, ky, kx) = (k / (p * p), (k / p) % p, k % p);
        let (py, px) = (pi / gw, pi % gw);
        d[ch * h * w + (py * p + ky) * w + px * p + kx]
    });
    params.tokenizer.forward(&patches)
}

/// Per-frame event tokens for one sample, `F × N_p × D`, before temporal pooling.
pub fn frame_tokens<T: Scalar>(
    frames: &Tensor<T>,
    cfg: &PrompterConfig,
    grid: (usize, usize),
    params: &PrompterParams<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let f = frames.dims().first().copied().unwrap_or(0);
    if f == 0 {
        return Err(Error::Degenerate("event sample with zero frames".into()));
    }
    let maps = conv_stem(frames, params)?;
    let [_, _, h, w] = *maps.dims() else { unreachable!() };
    if h % TOKEN_PATCH != 0 || w % TOKEN_PATCH != 0 || (h / TOKEN_PATCH, w / TOKEN_PATCH) != grid {
        return Err(Error::config(format!(
            "event token grid {}x{} does not match backbone grid {}x{}",
            h / TOKEN_PATCH,
            w / TOKEN_PATCH,
            grid.0,
            grid.1
        )));
    }
    let plan = (cfg.transform == Transform::Dct).then(|| DctPlan::<T>::new(h, w));
    let mut out = Vec::new();
    for i in 0..f {
        let map = maps.slice0(i);
        let filtered = match cfg.transform {
            Transform::Dct => plan.as_ref().unwrap().lowpass(&map, cfg.keep_fraction)?,
            Transform::Dft => dft_lowpass_filter(&map, cfg.keep_fraction)?,
            Transform::None => map,
        };
        out.extend(tokenize(&filtered, params)?.into_data());
    }
    let d = params.tokenizer.w.dims()[1];
    Tensor::new(vec![f, grid.0 * grid.1, d], out)
}

/// Mean over the frame axis of `F × N × D`, accumulated in frame order.
pub fn mean_over_frames<T: Scalar>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let [f, n, d] = *tokens.dims() else {
        return Err(Error::Shape {
            op: "mean_over_frames",
            lhs: tokens.dims().to_vec(),
            rhs: vec![],
        });
    };
    if f == 0 {
        return Err(Error::Degenerate("mean over zero frames".into()));
    }
    let mut acc = vec![T::zero(); n * d];
    for frame in tokens.data().chunks(n * d) {
        for (a, &v) in acc.iter_mut().zip(frame) {
            *a = *a + v;
        }
    }
    let inv = T::one() / T::from_usize(f).unwrap();
    Tensor::new(vec![n, d], acc.into_iter().map(|v| v * inv).collect())
}

/// `T_prompt = M_proj · T̄_event` for one sample.
pub fn project<T: Scalar>(mean_tokens: &Tensor<T>, params: &PrompterParams<T>) -> Result<Tensor<T>> {
    matmul(&params.proj, mean_tokens)
}

/// Output of the prompter for a batch.
#[derive(Debug, Clone)]
pub struct PrompterOutput<T> {
    /// Frame-averaged event tokens, `B × N_p × D`.
    pub mean_tokens: Tensor<T>,
    pub prompts: PromptSet<T>,
}

/// `frames`: B×F×3×H×W.
pub fn make_prompts<T: Scalar>(
    frames: &Tensor<T>,
    cfg: &PrompterConfig,
    grid: (usize, usize),
    params: &PrompterParams<T>,
) -> Result<PrompterOutput<T>> {
    let [b, f, _, _, _] = *frames.dims() else {
        return Err(Error::Shape {
            op: "make_prompts",
            lhs: frames.dims().to_vec(),
            rhs: vec![],
        });
    };
    if f == 0 {
        return Err(Error::Degenerate("event sample with zero frames".into()));
    }
    let mut mean = Vec::with_capacity(b);
    let mut prompts = Vec::with_capacity(b);
    for i in 0..b {
        let m = mean_over_frames(&frame_tokens(&frames.slice0(i), cfg, grid, params)?)?;
        prompts.push(project(&m, params)?);
        mean.push(m);
    }
    let (np, d) = (grid.0 * grid.1, params.tokenizer.w.dims()[1]);
    let stack = |v: Vec<Tensor<T>>, rows: usize| -> Result<Tensor<T>> {
        if v.is_empty() {
            Ok(Tensor::zeros(&[0, rows, d]))
        } else {
            Tensor::stack(&v)
        }
    };
    Ok(PrompterOutput {
        mean_tokens: stack(mean, np)?,
        prompts: PromptSet {
            data: stack(prompts, params.prompt_count())?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn setup() -> (PrompterConfig, PrompterParams<f64>) {
        let cfg = PrompterConfig {
            stem_channels: 4,
            prompt_count: 3,
            ..Default::default()
        };
        let params = PrompterParams::init(&cfg, 8, 2, &mut seeded_rng(9));
        (cfg, params)
    }

    #[test]
    fn stem_quarters_extent() {
        let (_, params) = setup();
        let x = Tensor::from_fn(&[2, 3, 32, 16], |i| (i as f64 * 0.1).cos());
        assert_eq!(conv_stem(&x, &params).unwrap().dims(), &[2, 4, 8, 4]);
        assert!(matches!(
            conv_stem(&Tensor::zeros(&[1, 3, 30, 16]), &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_input_zero_bias_stays_zero() {
        let (_, params) = setup();
        let y = conv_stem(&Tensor::zeros(&[1, 3, 16, 16]), &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_frames_pool_to_single_frame() {
        let (cfg, params) = setup();
        let one = Tensor::from_fn(&[1, 3, 32, 16], |i| ((i * 7919) % 13) as f64 / 13.0);
        let five = Tensor::stack(&vec![one.slice0(0); 5]).unwrap();
        let a = mean_over_frames(&frame_tokens(&one, &cfg, (2, 1), &params).unwrap()).unwrap();
        let b = mean_over_frames(&frame_tokens(&five, &cfg, (2, 1), &params).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn grid_mismatch_and_zero_frames() {
        let (cfg, params) = setup();
        let x = Tensor::zeros(&[1, 3, 32, 16]);
        assert!(matches!(frame_tokens(&x, &cfg, (1, 1), &params), Err(Error::Config(_))));
        let empty = Tensor::zeros(&[1, 0, 3, 32, 16]);
        assert!(matches!(make_prompts(&empty, &cfg, (2, 1), &params), Err(Error::Degenerate(_))));
    }

    #[test]
    fn output_shape() {
        let (cfg, params) = setup();
        let x = Tensor::from_fn(&[2, 5, 3, 32, 16], |i| (i as f64).sin());
        let out = make_prompts(&x, &cfg, (2, 1), &params).unwrap();
        assert_eq!(out.mean_tokens.dims(), &[2, 2, 8]);
        assert_eq!(out.prompts.data.dims(), &[2, 3, 8]);
    }
}
