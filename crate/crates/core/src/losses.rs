//! Data-fitting terms, the scaled ELBO, and the two cross-worker
//! aggregation semantics.
//!
//! Losses that are nonlinear in the sample statistics (MSE of the mean
//! prediction, cross-entropy of the mean probability, Gaussian NLL of the
//! sample mean/variance) cannot be reproduced exactly by averaging
//! per-worker gradients: standard deviations do not aggregate through
//! simple averaging. The `Exact` mode allreduces [`SampleStatistics`]
//! (mean and second moment — two parameters) before backward, computes
//! per-sample loss derivatives from the GLOBAL statistics, and injects
//! them as gradient seeds; the subsequent gradient average then equals the
//! sequential gradient. `Approximate` mode (the default) differentiates a
//! purely local loss and averages gradients, which for one sample per
//! worker turns cross-entropy of the mean probability into a geometric
//! mean over class probabilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{ReduceKind, Tape, Var};
use crate::tensor::{same_shape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss requires at least one prediction sample")]
    NoSamples,
    #[error("gaussian_nll requires at least two samples, got {count}")]
    NeedTwoSamples { count: usize },
    #[error("statistics not globally reduced: count {got} does not match configured total {expected}")]
    StatsNotGlobal { got: usize, expected: usize },
    #[error("exact aggregation is not applicable to the sample-linear kind {kind:?}")]
    ExactNotApplicable { kind: LossKind },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerSampleKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// MSE of the mean prediction over samples (nonlinear in samples).
    MseOfMean,
    /// Cross-entropy of the arithmetic-mean class probability
    /// (nonlinear in samples). Predictions are logits; targets one-hot.
    CrossEntropyOfMeanProb,
    /// Gaussian NLL with the sample mean/variance as the predictive
    /// distribution (nonlinear in samples).
    GaussianNll,
    /// Mean over samples of a per-sample loss (linear in samples):
    /// gradient averaging commutes exactly.
    MeanOfPerSample(PerSampleKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Approximate,
    Exact,
}

/// Full description of the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub aggregation: AggregationMode,
    /// |D| used to scale the prior matching term.
    pub dataset_size: usize,
    /// Predictive-variance floor for the Gaussian NLL.
    pub variance_floor: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, aggregation: AggregationMode, dataset_size: usize) -> Self {
        LossSpec {
            kind,
            aggregation,
            dataset_size,
            variance_floor: 1e-6,
        }
    }

    /// Whether the data term is nonlinear in the sample statistics.
    pub fn is_nonlinear_in_samples(&self) -> bool {
        !matches!(self.kind, LossKind::MeanOfPerSample(_))
    }
}

/// Elementwise predictive mean and second moment over samples.
///
/// The two communicated parameters of the exact aggregation scheme:
/// the pooled variance of any worker partition is recoverable from the
/// count-weighted merge.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStatistics {
    pub mean: Tensor,
    pub second_moment: Tensor,
    pub count: usize,
}

impl SampleStatistics {
    pub fn empty(shape: &[usize]) -> Self {
        SampleStatistics {
            mean: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            count: 0,
        }
    }

    /// Per-element mean and second moment via fixed-order pairwise
    /// summation. For power-of-two sample counts the sums over identical
    /// values are exact, so S identical passes give variance exactly 0.
    pub fn from_samples(samples: &[&Tensor]) -> Result<Self, LossError> {
        let first = samples.first().ok_or(LossError::NoSamples)?;
        for s in samples {
            same_shape("sample statistics", first.shape(), s.shape())?;
        }
        let n = first.numel();
        let s_count = samples.len();
        let inv = 1.0 / s_count as f64;
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        let mut vals = vec![0.0; s_count];
        let mut sqs = vec![0.0; s_count];
        for i in 0..n {
            for (j, s) in samples.iter().enumerate() {
                let v = s.data()[i];
                vals[j] = v;
                sqs[j] = v * v;
            }
            mean[i] = pairwise_sum(&mut vals) * inv;
            m2[i] = pairwise_sum(&mut sqs) * inv;
        }
        Ok(SampleStatistics {
            mean: Tensor::new(first.shape().to_vec(), mean)?,
            second_moment: Tensor::new(first.shape().to_vec(), m2)?,
            count: s_count,
        })
    }

    /// Elementwise population variance, clamped at zero against the
    /// −1e-12-scale negatives that cancellation can produce.
    pub fn variance(&self) -> Vec<f64> {
        self.mean
            .data()
            .iter()
            .zip(self.second_moment.data())
            .map(|(&m, &m2)| (m2 - m * m).max(0.0))
            .collect()
    }

    /// Population standard deviation per element.
    pub fn std(&self) -> Vec<f64> {
        self.variance().iter().map(|v| v.sqrt()).collect()
    }
}

/// Adjacent-pair tree reduction over a scratch buffer.
fn pairwise_sum(xs: &mut [f64]) -> f64 {
    let mut len = xs.len();
    if len == 0 {
        return 0.0;
    }
    while len > 1 {
        let half = len / 2;
        for k in 0..half {
            xs[k] = xs[2 * k] + xs[2 * k + 1];
        }
        if len % 2 == 1 {
            xs[half] = xs[len - 1];
            len = half + 1;
        } else {
            len = half;
        }
    }
    xs[0]
}

/// Count-weighted merge; exact pooled mean and second moment.
pub fn merge_statistics(
    a: &SampleStatistics,
    b: &SampleStatistics,
) -> Result<SampleStatistics, LossError> {
    if a.count == 0 {
        return Ok(b.clone());
    }
    if b.count == 0 {
        return Ok(a.clone());
    }
    same_shape("merge_statistics", a.mean.shape(), b.mean.shape())?;
    let n = (a.count + b.count) as f64;
    let (wa, wb) = (a.count as f64 / n, b.count as f64 / n);
    let mean: Vec<f64> = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(&x, &y)| wa * x + wb * y)
        .collect();
    let m2: Vec<f64> = a
        .second_moment
        .data()
        .iter()
        .zip(b.second_moment.data())
        .map(|(&x, &y)| wa * x + wb * y)
        .collect();
    Ok(SampleStatistics {
        mean: Tensor::new(a.mean.shape().to_vec(), mean)?,
        second_moment: Tensor::new(a.mean.shape().to_vec(), m2)?,
        count: a.count + b.count,
    })
}

/// Builds the differentiable data term for the given prediction samples.
///
/// For the cross-entropy kinds, `preds` are logits and `targets` is a
/// one-hot matrix; probabilities are formed through log-softmax on the
/// tape.
fn data_term(
    tape: &mut Tape,
    preds: &[Var],
    targets: Var,
    spec: &LossSpec,
) -> Result<Var, LossError> {
    if preds.is_empty() {
        return Err(LossError::NoSamples);
    }
    let s_count = preds.len();
    let inv_s = 1.0 / s_count as f64;
    match spec.kind {
        LossKind::MseOfMean => {
            let mean = mean_of_vars(tape, preds)?;
            let diff = tape.sub(mean, targets)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq)?)
        }
        LossKind::CrossEntropyOfMeanProb => {
            let mut probs = Vec::with_capacity(s_count);
            for &logits in preds {
                let lsm = tape.log_softmax(logits)?;
                probs.push(tape.exp(lsm)?);
            }
            let mean_prob = mean_of_vars(tape, &probs)?;
            let picked = tape.mul(mean_prob, targets)?;
            let true_prob = tape.reduce(ReduceKind::Sum, picked, Some(1))?;
            // extreme logits can underflow a class probability to exactly 0
            let floored = tape.clamp_min(true_prob, 1e-300)?;
            let logp = tape.log(floored)?;
            let m = tape.mean(logp)?;
            Ok(tape.scale(m, -1.0)?)
        }
        LossKind::GaussianNll => {
            if s_count < 2 {
                return Err(LossError::NeedTwoSamples { count: s_count });
            }
            let mean = mean_of_vars(tape, preds)?;
            let squares: Vec<Var> = preds
                .iter()
                .map(|&p| tape.mul(p, p))
                .collect::<Result<_, _>>()?;
            let m2 = mean_of_vars(tape, &squares)?;
            let mean_sq = tape.mul(mean, mean)?;
            let raw_var = tape.sub(m2, mean_sq)?;
            let var = tape.clamp_min(raw_var, spec.variance_floor)?;
            let scaled = tape.scale(var, 2.0 * std::f64::consts::PI)?;
            let log_term = tape.log(scaled)?;
            let resid = tape.sub(targets, mean)?;
            let resid_sq = tape.mul(resid, resid)?;
            let ratio = tape.div(resid_sq, var)?;
            let sum = tape.add(log_term, ratio)?;
            let m = tape.mean(sum)?;
            Ok(tape.scale(m, 0.5)?)
        }
        LossKind::MeanOfPerSample(per) => {
            let mut total: Option<Var> = None;
            for &pred in preds {
                let term = match per {
                    PerSampleKind::Mse => {
                        let diff = tape.sub(pred, targets)?;
                        let sq = tape.mul(diff, diff)?;
                        tape.mean(sq)?
                    }
                    PerSampleKind::CrossEntropy => {
                        let lsm = tape.log_softmax(pred)?;
                        let picked = tape.mul(lsm, targets)?;
                        let true_logp = tape.reduce(ReduceKind::Sum, picked, Some(1))?;
                        let m = tape.mean(true_logp)?;
                        tape.scale(m, -1.0)?
                    }
                };
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
            Ok(tape.scale(total.unwrap(), inv_s)?)
        }
    }
}

/// Negative scaled ELBO: L_data + KL / |D|, differentiable end to end.
/// Pass `kl = None` to train without a prior matching term.
pub fn elbo_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: Var,
    kl: Option<Var>,
    spec: &LossSpec,
) -> Result<Var, LossError> {
    let data = data_term(tape, preds, targets, spec)?;
    match kl {
        None => Ok(data),
        Some(kl) => {
            let scaled = tape.scale(kl, 1.0 / spec.dataset_size as f64)?;
            Ok(tape.add(data, scaled)?)
        }
    }
}

fn mean_of_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var, TensorError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}

/// Gaussian negative log-likelihood of targets under the per-element
/// predictive Normal(mean, variance) summarized by `stats`:
/// mean over elements of ½·[ln(2π·v) + (target − mean)²/v],
/// v = max(variance, floor).
pub fn gaussian_nll(
    stats: &SampleStatistics,
    targets: &Tensor,
    variance_floor: f64,
) -> Result<f64, LossError> {
    if stats.count < 2 {
        return Err(LossError::NeedTwoSamples { count: stats.count });
    }
    same_shape("gaussian_nll", stats.mean.shape(), targets.shape())?;
    let var = stats.variance();
    let n = targets.numel();
    let mut acc = 0.0;
    for i in 0..n {
        let v = var[i].max(variance_floor);
        let r = targets.data()[i] - stats.mean.data()[i];
        acc += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
    }
    Ok(acc / n as f64)
}

/// Loss value recomputed from globally reduced statistics (reporting path
/// for the exact aggregation mode).
pub fn loss_value_from_stats(
    stats: &SampleStatistics,
    targets: &Tensor,
    spec: &LossSpec,
) -> Result<f64, LossError> {
    match spec.kind {
        LossKind::MseOfMean => {
            same_shape("loss_value", stats.mean.shape(), targets.shape())?;
            let n = targets.numel();
            let mut acc = 0.0;
            for i in 0..n {
                let d = stats.mean.data()[i] - targets.data()[i];
                acc += d * d;
            }
            Ok(acc / n as f64)
        }
        LossKind::CrossEntropyOfMeanProb => {
            same_shape("loss_value", stats.mean.shape(), targets.shape())?;
            let rows = targets.rows();
            let cols = targets.cols();
            let mut acc = 0.0;
            for r in 0..rows {
                let mut p_true = 0.0;
                for c in 0..cols {
                    p_true += stats.mean.data()[r * cols + c] * targets.data()[r * cols + c];
                }
                acc -= p_true.max(1e-300).ln();
            }
            Ok(acc / rows as f64)
        }
        LossKind::GaussianNll => gaussian_nll(stats, targets, spec.variance_floor),
        LossKind::MeanOfPerSample(_) => Err(LossError::ExactNotApplicable { kind: spec.kind }),
    }
}

/// Per-local-sample loss derivatives ∂L/∂ŷ_s computed from GLOBAL
/// statistics, for the exact distributed aggregation mode.
///
/// The caller seeds its tape with these (scaled by the world size so the
/// later gradient *average* reconstructs the full sum) and backpropagates
/// locally; after the gradient allreduce the result equals the sequential
/// gradient.
///
/// Derivative formulas per kind, with M = element count of one prediction,
/// S = total samples, m = global mean, E2 = global second moment,
/// v = max(E2 − m², floor):
///
/// * `MseOfMean`:   L = (1/M) Σ (m − y)²
///   ∂L/∂ŷ_s = 2 (m − y) / (M · S)
/// * `GaussianNll`: L = (1/M) Σ ½ [ln(2πv) + (y − m)²/v]
///   ∂L/∂m  = (1/M) (m − y)/v  − [v unclamped] · 2m · (1/M) ½ (1/v − (y−m)²/v²)
///   ∂L/∂E2 = [v unclamped] · (1/M) ½ (1/v − (y−m)²/v²)
///   ∂L/∂ŷ_s = ∂L/∂m · (1/S) + ∂L/∂E2 · (2 ŷ_s / S)
/// * `CrossEntropyOfMeanProb` (local preds are per-sample PROBABILITIES,
///   stats taken over probabilities, targets one-hot):
///   L = −(1/B) Σ_b ln p̄[b, y_b]
///   ∂L/∂p_s[b,c] = −1[c = y_b] / (B · S · p̄[b, y_b])
pub fn exact_distributed_loss_gradient(
    local_preds: &[Tensor],
    targets: &Tensor,
    global_stats: &SampleStatistics,
    spec: &LossSpec,
    total_samples: usize,
) -> Result<Vec<Vec<f64>>, LossError> {
    if global_stats.count != total_samples {
        return Err(LossError::StatsNotGlobal {
            got: global_stats.count,
            expected: total_samples,
        });
    }
    let s_total = total_samples as f64;
    let m = global_stats.mean.data();
    let n = targets.numel();
    match spec.kind {
        LossKind::MseOfMean => {
            same_shape("exact gradient", global_stats.mean.shape(), targets.shape())?;
            let m_elems = n as f64;
            let seed: Vec<f64> = (0..n)
                .map(|i| 2.0 * (m[i] - targets.data()[i]) / (m_elems * s_total))
                .collect();
            Ok(local_preds.iter().map(|_| seed.clone()).collect())
        }
        LossKind::GaussianNll => {
            if total_samples < 2 {
                return Err(LossError::NeedTwoSamples {
                    count: total_samples,
                });
            }
            same_shape("exact gradient", global_stats.mean.shape(), targets.shape())?;
            let m_elems = n as f64;
            let e2 = global_stats.second_moment.data();
            let mut dl_dm = vec![0.0; n];
            let mut dl_de2 = vec![0.0; n];
            for i in 0..n {
                let raw = e2[i] - m[i] * m[i];
                let clamped = raw <= spec.variance_floor;
                let v = raw.max(spec.variance_floor);
                let r = targets.data()[i] - m[i];
                let dl_dv = 0.5 * (1.0 / v - r * r / (v * v)) / m_elems;
                dl_dm[i] = (m[i] - targets.data()[i]) / v / m_elems;
                if !clamped {
                    dl_dm[i] += dl_dv * (-2.0 * m[i]);
                    dl_de2[i] = dl_dv;
                }
            }
            Ok(local_preds
                .iter()
                .map(|pred| {
                    (0..n)
                        .map(|i| {
                            dl_dm[i] / s_total + dl_de2[i] * 2.0 * pred.data()[i] / s_total
                        })
                        .collect()
                })
                .collect())
        }
        LossKind::CrossEntropyOfMeanProb => {
            same_shape("exact gradient", global_stats.mean.shape(), targets.shape())?;
            let rows = targets.rows() as f64;
            let cols = targets.cols();
            let seed: Vec<f64> = (0..n)
                .map(|i| {
                    if targets.data()[i] == 0.0 {
                        0.0
                    } else {
                        let b = i / cols;
                        let mut p_true = 0.0;
                        for c in 0..cols {
                            p_true += m[b * cols + c] * targets.data()[b * cols + c];
                        }
                        -1.0 / (rows * s_total * p_true)
                    }
                })
                .collect();
            Ok(local_preds.iter().map(|_| seed.clone()).collect())
        }
        LossKind::MeanOfPerSample(_) => Err(LossError::ExactNotApplicable { kind: spec.kind }),
    }
}
