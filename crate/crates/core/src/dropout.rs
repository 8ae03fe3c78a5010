//! Inverted dropout as an approximate Bayesian method.
//!
//! Stochastic masks stay enabled at inference time; S masked forward
//! passes give a predictive mean and a population standard deviation
//! (divide-by-S, defined at S = 1) per output element.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::collectives::ProcessGroup;
use crate::error::EngineError;
use crate::losses::SampleStatistics;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::variational::{forward_sampled, BayesianModel, NoiseStream, StagedModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DropoutError {
    #[error("drop probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("mc_predict requires at least one sample")]
    ZeroSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Deterministic,
    Stochastic,
}

/// Inverted-dropout layer: in stochastic mode each activation is kept with
/// probability 1−p and scaled by 1/(1−p), so E[output] = input. In
/// deterministic mode the layer is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutLayer {
    pub drop_probability: f64,
    pub mode: DropoutMode,
}

impl DropoutLayer {
    pub fn stochastic(p: f64) -> Result<Self, DropoutError> {
        if !(0.0..1.0).contains(&p) {
            return Err(DropoutError::InvalidProbability(p));
        }
        Ok(DropoutLayer {
            drop_probability: p,
            mode: DropoutMode::Stochastic,
        })
    }

    pub fn deterministic(p: f64) -> Result<Self, DropoutError> {
        if !(0.0..1.0).contains(&p) {
            return Err(DropoutError::InvalidProbability(p));
        }
        Ok(DropoutLayer {
            drop_probability: p,
            mode: DropoutMode::Deterministic,
        })
    }

    pub fn is_stochastic(&self) -> bool {
        self.mode == DropoutMode::Stochastic
    }
}

/// Applies dropout on the tape. `uniforms` supplies one U[0,1) draw per
/// element; an element is kept iff its draw is ≥ p. The mask enters the
/// graph as a constant factor, so gradient flows through kept units only.
pub fn dropout_forward(
    tape: &mut Tape,
    layer: &DropoutLayer,
    x: Var,
    uniforms: &[f64],
) -> Result<Var, TensorError> {
    if layer.mode == DropoutMode::Deterministic || layer.drop_probability == 0.0 {
        return Ok(x);
    }
    let p = layer.drop_probability;
    let keep_scale = 1.0 / (1.0 - p);
    let shape = tape.value(x).shape().to_vec();
    debug_assert_eq!(uniforms.len(), tape.value(x).numel());
    let mask: Vec<f64> = uniforms
        .iter()
        .map(|&u| if u >= p { keep_scale } else { 0.0 })
        .collect();
    let mask = tape.leaf(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// Per-element mean and population standard deviation over `s_total`
/// stochastic passes. `stream_for(s)` must yield the per-sample noise
/// stream for global sample index s.
pub fn mc_predict<F>(
    model: &BayesianModel,
    x: &Tensor,
    s_total: usize,
    mut stream_for: F,
) -> Result<(Tensor, Tensor), EngineError>
where
    F: FnMut(usize) -> ChaCha8Rng,
{
    if s_total == 0 {
        return Err(EngineError::config("mc_predict requires at least one sample"));
    }
    let stats = local_statistics(model, x, 0..s_total, &mut stream_for)?;
    Ok(stats_to_mean_std(&stats))
}

/// Sample-parallel predictive pass: this worker evaluates its contiguous
/// share of the global sample indices with the SAME per-sample streams the
/// sequential path uses, then statistics are pooled across the group.
pub fn mc_predict_group<F>(
    model: &BayesianModel,
    x: &Tensor,
    s_total: usize,
    group: &mut ProcessGroup,
    mut stream_for: F,
) -> Result<(Tensor, Tensor), EngineError>
where
    F: FnMut(usize) -> ChaCha8Rng,
{
    if s_total == 0 {
        return Err(EngineError::config("mc_predict requires at least one sample"));
    }
    let range = sample_share(s_total, group.rank(), group.world_size());
    let local = if range.is_empty() {
        let n = x.rows() * model.output_dim();
        SampleStatistics::empty(&[n])
    } else {
        let stats = local_statistics(model, x, range, &mut stream_for)?;
        // flatten to the rank-1 layout the collective carries
        SampleStatistics {
            mean: Tensor::new(vec![stats.mean.numel()], stats.mean.data().to_vec())?,
            second_moment: Tensor::new(
                vec![stats.second_moment.numel()],
                stats.second_moment.data().to_vec(),
            )?,
            count: stats.count,
        }
    };
    let merged = group.allgather_statistics(&local)?;
    let shaped = SampleStatistics {
        mean: Tensor::new(
            vec![x.rows(), model.output_dim()],
            merged.mean.data().to_vec(),
        )?,
        second_moment: Tensor::new(
            vec![x.rows(), model.output_dim()],
            merged.second_moment.data().to_vec(),
        )?,
        count: merged.count,
    };
    Ok(stats_to_mean_std(&shaped))
}

/// Contiguous block of global sample indices owned by `rank`; remainders
/// spill to the lowest ranks.
pub fn sample_share(s_total: usize, rank: usize, world: usize) -> std::ops::Range<usize> {
    let base = s_total / world;
    let rem = s_total % world;
    let start = rank * base + rank.min(rem);
    let len = base + usize::from(rank < rem);
    start..start + len
}

fn local_statistics<F>(
    model: &BayesianModel,
    x: &Tensor,
    samples: std::ops::Range<usize>,
    stream_for: &mut F,
) -> Result<SampleStatistics, EngineError>
where
    F: FnMut(usize) -> ChaCha8Rng,
{
    let mut outputs: Vec<Tensor> = Vec::with_capacity(samples.len());
    for s in samples {
        let mut tape = Tape::new();
        let staged = StagedModel::stage(model, &mut tape);
        let xv = tape.leaf(x.clone());
        let mut rng = stream_for(s);
        let y = forward_sampled(&mut tape, &staged, xv, &mut NoiseStream::Rng(&mut rng))?;
        outputs.push(tape.value(y).clone());
    }
    Ok(SampleStatistics::from_samples(
        &outputs.iter().collect::<Vec<_>>(),
    )?)
}

fn stats_to_mean_std(stats: &SampleStatistics) -> (Tensor, Tensor) {
    let std = stats.std();
    (
        stats.mean.clone(),
        Tensor::new(stats.mean.shape().to_vec(), std).expect("shape matches"),
    )
}
