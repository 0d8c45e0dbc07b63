//! Weighted BCE with analytic gradient, the five multi-label metrics, the head-only
//! trainer, and finite-difference gradient checks.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{build_memory_bank, Dropout};
use crate::model::{Grads, Model, PreparedSample};
use crate::numerics::{gaussian, seeded_rng, Scalar, Tensor};

fn check_binary<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    match labels.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        Some(i) => Err(Error::data(format!("label at index {i} is {} (must be 0 or 1)", labels.data()[i]))),
        None => Ok(()),
    }
}

fn rank2<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.dims() {
        [b, a] => Ok((b, a)),
        _ => Err(Error::Shape {
            op,
            lhs: x.dims().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Positive ratio per attribute over the rows of a `B × A` label matrix.
pub fn attribute_ratios<T: Scalar>(labels: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, a) = rank2("attribute_ratios", labels)?;
    check_binary(labels)?;
    if b == 0 {
        return Err(Error::Degenerate("attribute ratios of an empty label set".into()));
    }
    let mut pos = vec![0usize; a];
    for row in labels.data().chunks(a.max(1)) {
        for (c, &v) in pos.iter_mut().zip(row) {
            *c += (v == T::one()) as usize;
        }
    }
    Tensor::new(vec![a], pos.into_iter().map(|c| T::c(c as f64 / b as f64)).collect())
}

/// Element weight: `exp(1 − r)` for positives, `exp(r)` for negatives.
pub fn bce_weight<T: Scalar>(ratio: T, label: T) -> T {
    if label == T::one() {
        (T::one() - ratio).exp()
    } else {
        ratio.exp()
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_bce_inputs<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, ratios: &Tensor<T>) -> Result<(usize, usize)> {
    let (b, a) = rank2("weighted_bce", logits)?;
    if labels.dims() != logits.dims() || ratios.dims() != [a] {
        return Err(Error::Shape {
            op: "weighted_bce",
            lhs: logits.dims().to_vec(),
            rhs: [labels.dims(), ratios.dims()].concat(),
        });
    }
    check_binary(labels)?;
    Ok((b, a))
}

/// Mean weighted BCE over all `B·A` elements, plus the per-element losses.
pub fn weighted_bce<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, ratios: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (b, a) = check_bce_inputs(logits, labels, ratios)?;
    let r = ratios.data();
    let (p, y) = (logits.data(), labels.data());
    let per = Tensor::from_fn(&[b, a], |i| {
        let w = bce_weight(r[i % a], y[i]);
        // −[y log σ(p) + (1−y) log(1−σ(p))] = y·softplus(−p) + (1−y)·softplus(p)
        w * (y[i] * softplus(-p[i]) + (T::one() - y[i]) * softplus(p[i]))
    });
    if b * a == 0 {
        return Ok((T::zero(), per));
    }
    let total = per.data().iter().fold(T::zero(), |s, &v| s + v);
    Ok((total / T::from_usize(b * a).unwrap(), per))
}

/// Gradient of the mean loss with respect to the logits: `w(σ(p) − y) / (B·A)`.
pub fn weighted_bce_grad<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, ratios: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, a) = check_bce_inputs(logits, labels, ratios)?;
    let r = ratios.data();
    let (p, y) = (logits.data(), labels.data());
    let scale = T::one() / T::from_usize((b * a).max(1)).unwrap();
    Ok(Tensor::from_fn(&[b, a], |i| {
        bce_weight(r[i % a], y[i]) * (sigmoid(p[i]) - y[i]) * scale
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ma: f64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_attribute: Vec<Confusion>,
}

impl MetricsReport {
    /// JSON with every scalar printed to 6 decimals.
    pub fn to_json(&self, names: Option<&[String]>) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\n  \"mA\": {:.6},\n  \"acc\": {:.6},\n  \"prec\": {:.6},\n  \"recall\": {:.6},\n  \"f1\": {:.6},\n  \"per_attribute\": [",
            self.ma, self.acc, self.precision, self.recall, self.f1
        );
        for (j, c) in self.per_attribute.iter().enumerate() {
            let name = names
                .and_then(|n| n.get(j))
                .cloned()
                .unwrap_or_else(|| format!("attr{j}"));
            let _ = write!(
                s,
                "{}\n    {{\"name\": {}, \"tp\": {}, \"tn\": {}, \"fp\": {}, \"fn\": {}, \"accuracy\": {:.6}}}",
                if j == 0 { "" } else { "," },
                serde_json::Value::String(name),
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                c.accuracy()
            );
        }
        s.push_str(if self.per_attribute.is_empty() { "]\n}\n" } else { "\n  ]\n}\n" });
        s
    }
}

/// Predicted positive iff `logit > threshold`.
pub fn compute_metrics<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, threshold: T) -> Result<MetricsReport> {
    let (_, a) = rank2("compute_metrics", logits)?;
    if labels.dims() != logits.dims() {
        return Err(Error::Shape {
            op: "compute_metrics",
            lhs: logits.dims().to_vec(),
            rhs: labels.dims().to_vec(),
        });
    }
    check_binary(labels)?;
    let mut per = vec![Confusion::default(); a];
    for (i, (&p, &y)) in logits.data().iter().zip(labels.data()).enumerate() {
        let c = &mut per[i % a];
        match (p > threshold, y == T::one()) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ma = if a == 0 {
        0.0
    } else {
        per.iter().map(Confusion::accuracy).sum::<f64>() / a as f64
    };
    let sum = |f: fn(&Confusion) -> u64| per.iter().map(f).sum::<u64>();
    let (tp, tn, fp, fn_) = (sum(|c| c.tp), sum(|c| c.tn), sum(|c| c.fp), sum(|c| c.fn_));
    let acc = ratio(tp + tn, tp + tn + fp + fn_);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        ma,
        acc,
        precision,
        recall,
        f1,
        per_attribute: per,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 0.5,
            batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-split loss before each step and after the last one (`steps + 1` entries).
    pub loss: Vec<f64>,
}

/// Logits for every prepared sample, `n × A`.
pub fn predict_prepared<T: Scalar>(model: &Model<T>, samples: &[PreparedSample<T>]) -> Result<Tensor<T>> {
    let a = model.config().attributes.len();
    let mut out = Vec::with_capacity(samples.len() * a);
    for s in samples {
        out.extend(model.forward_prepared(s, &Dropout::Disabled)?.0.into_data());
    }
    Tensor::new(vec![samples.len(), a], out)
}

fn rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let a = x.last_dim();
    Tensor::new(vec![idx.len(), a], idx.iter().flat_map(|&i| x.row(i).to_vec()).collect())
}

/// Loss and trainable-tensor gradients of a batch.
pub fn batch_grads<T: Scalar>(
    model: &Model<T>,
    samples: &[&PreparedSample<T>],
    labels: &Tensor<T>,
    ratios: &Tensor<T>,
    dropout_seed: Option<u64>,
) -> Result<(T, Grads<T>)> {
    let rate = model.config().memory.dropout;
    let mut logits = Vec::new();
    let mut caches = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let dropout = match dropout_seed {
            Some(seed) if rate > 0.0 => Dropout::Seeded {
                rate,
                seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64),
            },
            _ => Dropout::Disabled,
        };
        let (l, c) = model.forward_prepared(s, &dropout)?;
        logits.extend(l.into_data());
        caches.push(c);
    }
    let a = labels.last_dim();
    let logits = Tensor::new(vec![samples.len(), a], logits)?;
    let (loss, _) = weighted_bce(&logits, labels, ratios)?;
    let dlogits = weighted_bce_grad(&logits, labels, ratios)?;
    let mut grads = Grads::zeros_like(&model.params);
    for (i, (s, c)) in samples.iter().zip(&caches).enumerate() {
        let g = model.backward_prepared(s, c, &Tensor::new(vec![a], dlogits.row(i).to_vec())?)?;
        grads.add_assign(&g)?;
    }
    Ok((loss, grads))
}

/// Gradient descent on `M_proj`, `W_cls`, and `b_cls`. Batches are drawn from seeded
/// per-epoch shuffles of the training samples.
pub fn train_head<T: Scalar>(
    model: &mut Model<T>,
    samples: &[PreparedSample<T>],
    labels: &Tensor<T>,
    ratios: &Tensor<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = samples.len();
    if n == 0 || labels.dims()[0] != n {
        return Err(Error::data(format!(
            "training needs samples matching labels, got {n} samples and {:?} labels",
            labels.dims()
        )));
    }
    let lr = T::c(cfg.lr);
    let batch = cfg.batch.min(n);
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let full_loss = |m: &Model<T>| -> Result<f64> {
        Ok(weighted_bce(&predict_prepared(m, samples)?, labels, ratios)?.0.to_f64_lossy())
    };
    let mut loss = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        loss.push(full_loss(model)?);
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let picked: Vec<&PreparedSample<T>> = idx.iter().map(|&i| &samples[i]).collect();
        let (_, grads) = batch_grads(model, &picked, &rows(labels, idx)?, ratios, Some(seed ^ step as u64))?;
        model.apply_grads(&grads, lr)?;
        log::debug!("step {step}: loss {:.6}", loss[step]);
    }
    loss.push(full_loss(model)?);
    Ok(TrainReport { loss })
}

/// Maximum relative error `|a − f| / max(|a|, |f|, 1e-12)` over all elements.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Fourth-order central difference `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h`.
pub fn five_point(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
}

/// Analytic weighted-BCE gradient against five-point central differences on random `B × A` instances.
pub fn gradcheck_bce(seed: u64, instances: usize, b: usize, a: usize, step: f64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let logits: Tensor<f64> = gaussian(&[b, a], 2.0, &mut rng);
        let u: Tensor<f64> = gaussian(&[b, a], 1.0, &mut rng);
        let labels = u.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let ratios = attribute_ratios(&labels)?;
        let g = weighted_bce_grad(&logits, &labels, &ratios)?;
        let mut fd = Vec::with_capacity(logits.len());
        for i in 0..logits.len() {
            let at = |offset: f64| -> Result<f64> {
                let mut x = logits.clone();
                x.data_mut()[i] += offset;
                Ok(weighted_bce(&x, &labels, &ratios)?.0)
            };
            fd.push(five_point(at, step)?);
        }
        worst = worst.max(max_rel_err(g.data(), &fd));
    }
    Ok(worst)
}

/// Trainable-tensor gradients of a small f64 model against central differences, as the
/// worst per-tensor [`normwise_rel_err`].
pub fn gradcheck_model(model: &Model<f64>, samples: &[PreparedSample<f64>], labels: &Tensor<f64>, step: f64) -> Result<f64> {
    let ratios = attribute_ratios(labels)?;
    let refs: Vec<&PreparedSample<f64>> = samples.iter().collect();
    let (_, g) = batch_grads(model, &refs, labels, &ratios, None)?;
    let loss = |m: &Model<f64>| -> Result<f64> {
        Ok(batch_grads(m, &refs, labels, &ratios, None)?.0)
    };
    let mut worst = 0.0f64;
    type Pick = fn(&mut Model<f64>) -> &mut Tensor<f64>;
    let targets: [(Pick, &Tensor<f64>); 3] = [
        (|m| &mut m.params.prompter.proj, &g.proj),
        (|m| &mut m.params.head.cls.w, &g.cls_w),
        (|m| &mut m.params.head.cls.b, &g.cls_b),
    ];
    for (pick, analytic) in targets {
        let mut fd = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut p = model.clone();
            pick(&mut p).data_mut()[i] += step;
            let mut m = model.clone();
            pick(&mut m).data_mut()[i] -= step;
            fd.push((loss(&p)? - loss(&m)?) / (2.0 * step));
        }
        worst = worst.max(normwise_rel_err(analytic.data(), &fd));
    }
    Ok(worst)
}

/// `max|a - f| / max(max|a|, max|f|)`: robust to entries far below the tensor's scale,
/// where central differences are dominated by cancellation.
pub fn normwise_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-12, f64::max);
    diff / scale
}

/// Builds a bank from the model's own features over the given samples.
pub fn bank_from_inputs<T: Scalar>(
    model: &Model<T>,
    inputs: &[crate::model::SampleInput<T>],
    labels: &Tensor<T>,
    k: usize,
    seed: u64,
) -> Result<crate::memory::MemoryBank<T>> {
    let d = model.config().backbone.dim;
    let (mut fr, mut fe) = (Vec::new(), Vec::new());
    for s in inputs {
        let (r, e) = model.bank_features(s)?;
        fr.extend(r.into_data());
        fe.extend(e.into_data());
    }
    let n = inputs.len();
    build_memory_bank(
        &Tensor::new(vec![n, d], fr)?,
        &Tensor::new(vec![n, d], fe)?,
        labels,
        &model.config().attributes,
        k,
        model.config().memory.kmeans_iters,
        seed,
    )
}
