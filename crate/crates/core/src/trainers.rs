//! Training engines: sequential, sample-parallel, data-parallel and hybrid,
//! all expressed as one SPMD worker loop parameterized by a per-rank role.
//!
//! The role fixes (a) which contiguous slice of the global batch the worker
//! loads, (b) which GLOBAL sample indices it draws, and (c) how its
//! augmentation stream is keyed. Weight-sample seeds are keyed by the
//! global sample index — never by rank — so the multiset of draws per batch
//! is identical across strategies, which is what makes the sequential run
//! an oracle for every parallel one. At P = 1 every strategy degenerates to
//! the identical code path and is therefore bit-exact against sequential.
//!
//! Gradients are averaged with a single flat allreduce per step. In exact
//! aggregation mode, per-sample loss derivatives are computed from
//! allgathered global statistics and seeded into the tape, scaled by the
//! world size so the averaging allreduce reconstructs the sequential sum.
//! The prior matching term is computed identically on every worker from
//! the synchronized parameters and is not rescaled: averaging P identical
//! KL gradients is a no-op.

use serde::{Deserialize, Serialize};

use crate::collectives::{run_inproc_workers, ProcessGroup, DEFAULT_TIMEOUT};
use crate::data::{augment, batches, Augmentation, SplitDataset};
use crate::dropout::sample_share;
use crate::error::EngineError;
use crate::losses::{
    elbo_loss, exact_distributed_loss_gradient, gaussian_nll, loss_value_from_stats,
    AggregationMode, LossKind, LossSpec, SampleStatistics,
};
use crate::metrics::{
    classification_nll, default_levels, mace, mace_classification, timed_epoch, MetricsRecord,
    Phase, TimingSample,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seed::SeedRecipe;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{
    forward_sampled, kl_to_standard_normal, BayesianModel, NoiseStream, StagedModel, WeightMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sequential,
    SampleParallel,
    DataParallel,
    Hybrid,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::SampleParallel => "sample_parallel",
            Strategy::DataParallel => "data_parallel",
            Strategy::Hybrid => "hybrid",
        }
    }
}

/// Batch-size semantics under scaling: `FixedGlobal` keeps the configured
/// size as the global batch; `FixedLocal` keeps per-worker load constant,
/// so the effective global batch is batch_size · P.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    FixedGlobal,
    FixedLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    IndependentPerWorker,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Full experiment description for one run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub world_size: usize,
    /// Total Monte Carlo samples S per batch.
    pub samples: usize,
    /// Hybrid grid: K sample ranks per data group.
    pub sample_groups: usize,
    /// Hybrid grid: G data groups.
    pub data_groups: usize,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub epochs: usize,
    pub base_seed: u64,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    pub augmentation: Augmentation,
    pub augmentation_mode: AugmentationMode,
    /// Scales the prior matching term; 0 trains without it entirely.
    pub kl_weight: f64,
    pub task: TaskKind,
    pub eval_samples: usize,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_interval: usize,
    /// Test hook: log the per-sample seed of every weight draw.
    pub record_seeds: bool,
    /// Test hook: log the allreduced gradient of every step.
    pub record_grads: bool,
}

impl TrainConfig {
    /// Effective global batch size after applying the batch mode.
    pub fn effective_global_batch(&self) -> usize {
        match self.batch_mode {
            BatchMode::FixedGlobal => self.batch_size,
            BatchMode::FixedLocal => self.batch_size * self.world_size,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let p = self.world_size;
        if p == 0 || self.samples == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(EngineError::config(
                "world_size, samples, batch_size and epochs must be positive",
            ));
        }
        match self.strategy {
            Strategy::Sequential => {
                if p != 1 {
                    return Err(EngineError::config(format!(
                        "sequential strategy requires world_size == 1, got {p}"
                    )));
                }
            }
            Strategy::SampleParallel => {
                if !self.samples.is_multiple_of(p) {
                    return Err(EngineError::config(format!(
                        "sample_parallel requires S mod P == 0, got S={} and P={p}",
                        self.samples
                    )));
                }
            }
            Strategy::DataParallel => {
                if self.batch_mode == BatchMode::FixedGlobal && !self.batch_size.is_multiple_of(p) {
                    return Err(EngineError::config(format!(
                        "data_parallel with fixed_global requires global_batch_size mod P == 0, got {} and P={p}",
                        self.batch_size
                    )));
                }
            }
            Strategy::Hybrid => {
                let (k, g) = (self.sample_groups, self.data_groups);
                if k * g != p {
                    return Err(EngineError::config(format!(
                        "hybrid requires K·G == P, got K={k}, G={g}, P={p}"
                    )));
                }
                if !self.samples.is_multiple_of(k) {
                    return Err(EngineError::config(format!(
                        "hybrid requires S mod K == 0, got S={} and K={k}",
                        self.samples
                    )));
                }
                if !self.effective_global_batch().is_multiple_of(g) {
                    return Err(EngineError::config(format!(
                        "hybrid requires global_batch_size mod G == 0, got {} and G={g}",
                        self.effective_global_batch()
                    )));
                }
            }
        }
        if self.loss.kind == LossKind::GaussianNll
            && self.loss.aggregation == AggregationMode::Approximate
        {
            let local = self.samples / self.sample_split();
            if local < 2 {
                return Err(EngineError::config(format!(
                    "gaussian_nll with approximate aggregation needs at least two samples per worker, got {local}"
                )));
            }
        }
        if self.loss.aggregation == AggregationMode::Exact && !self.loss.is_nonlinear_in_samples()
        {
            return Err(EngineError::config(
                "exact aggregation applies only to losses nonlinear in the sample statistics",
            ));
        }
        if self.eval_interval > 0 && self.task == TaskKind::Regression && self.eval_samples < 2 {
            return Err(EngineError::config(
                "regression evaluation needs eval_samples >= 2 for the predictive variance",
            ));
        }
        if self.kl_weight < 0.0 {
            return Err(EngineError::config("kl_weight must be non-negative"));
        }
        Ok(())
    }

    /// Number of ways the S samples are split (K for hybrid, P for
    /// sample-parallel, 1 otherwise).
    fn sample_split(&self) -> usize {
        match self.strategy {
            Strategy::SampleParallel => self.world_size,
            Strategy::Hybrid => self.sample_groups,
            _ => 1,
        }
    }
}

/// Per-rank execution role derived from the strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerRole {
    pub rank: usize,
    pub data_group: usize,
    pub data_groups: usize,
    pub sample_range: std::ops::Range<usize>,
    pub aug_rank: u64,
}

pub fn role_for(cfg: &TrainConfig, rank: usize) -> WorkerRole {
    let (data_group, data_groups, sample_range) = match cfg.strategy {
        Strategy::Sequential => (0, 1, 0..cfg.samples),
        Strategy::SampleParallel => {
            let per = cfg.samples / cfg.world_size;
            (0, 1, rank * per..(rank + 1) * per)
        }
        Strategy::DataParallel => (rank, cfg.world_size, 0..cfg.samples),
        Strategy::Hybrid => {
            let k = cfg.sample_groups;
            let per = cfg.samples / k;
            let (g, s) = (rank / k, rank % k);
            (g, cfg.data_groups, s * per..(s + 1) * per)
        }
    };
    let aug_rank = match cfg.augmentation_mode {
        AugmentationMode::Shared => 0,
        AugmentationMode::IndependentPerWorker => rank as u64,
    };
    WorkerRole {
        rank,
        data_group,
        data_groups,
        sample_range,
        aug_rank,
    }
}

/// Everything a finished run hands back. Metrics and timings are populated
/// on rank 0 only.
#[derive(Debug)]
pub struct TrainOutput {
    pub model: BayesianModel,
    pub final_params: Vec<f64>,
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<(usize, Vec<TimingSample>)>,
    pub seed_log: Vec<u64>,
    pub grad_log: Vec<Vec<f64>>,
}

/// Algorithm-1 training: the degenerate single-worker case of the loop.
pub fn train_sequential(
    model: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, EngineError> {
    expect_strategy(cfg, Strategy::Sequential)?;
    cfg.validate()?;
    let mut group = ProcessGroup::solo();
    train_worker(model, data, cfg, &mut group)
}

/// Algorithm-2 training: S/P samples per worker over the same batch.
pub fn train_sample_parallel(
    model: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, EngineError> {
    expect_strategy(cfg, Strategy::SampleParallel)?;
    train_inproc(model, data, cfg)
}

/// DDP baseline: batch sharded, full sample loop per worker.
pub fn train_data_parallel(
    model: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, EngineError> {
    expect_strategy(cfg, Strategy::DataParallel)?;
    train_inproc(model, data, cfg)
}

/// G data groups × K sample ranks with one flat gradient allreduce.
pub fn train_hybrid(
    model: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, EngineError> {
    expect_strategy(cfg, Strategy::Hybrid)?;
    train_inproc(model, data, cfg)
}

/// Strategy dispatch over in-process workers.
pub fn train(
    model: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, EngineError> {
    match cfg.strategy {
        Strategy::Sequential => train_sequential(model, data, cfg),
        _ => train_inproc(model, data, cfg),
    }
}

fn expect_strategy(cfg: &TrainConfig, expected: Strategy) -> Result<(), EngineError> {
    if cfg.strategy != expected {
        return Err(EngineError::config(format!(
            "engine expects strategy {}, config says {}",
            expected.name(),
            cfg.strategy.name()
        )));
    }
    Ok(())
}

fn train_inproc(
    model: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, EngineError> {
    cfg.validate()?;
    let results = run_inproc_workers(cfg.world_size, DEFAULT_TIMEOUT, |_rank, group| {
        train_worker(model, data, cfg, group)
    });
    let mut rank0 = None;
    for (rank, result) in results.into_iter().enumerate() {
        match result {
            Ok(out) if rank == 0 => rank0 = Some(out),
            Ok(_) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(rank0.expect("rank 0 result present"))
}

/// One worker of the SPMD loop; the caller provides the process group
/// (solo, in-process or socket — the loop is transport-agnostic).
pub fn train_worker(
    template: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
    group: &mut ProcessGroup,
) -> Result<TrainOutput, EngineError> {
    cfg.validate()?;
    if group.world_size() != cfg.world_size {
        return Err(EngineError::config(format!(
            "process group world size {} does not match config world_size {}",
            group.world_size(),
            cfg.world_size
        )));
    }
    let role = role_for(cfg, group.rank());
    let recipe = SeedRecipe::new(cfg.base_seed);
    let mut model = template.clone();

    // initial parameter synchronization so all replicas agree bit-exactly
    let mut params = group.broadcast(&model.to_flat(), 0)?;
    model.load_flat(&params);
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), params.len());

    let effective_global = cfg.effective_global_batch();
    let shard = if role.data_groups > 1 {
        Some((role.data_group, role.data_groups))
    } else {
        None
    };

    let mut output = TrainOutput {
        model: model.clone(),
        final_params: Vec::new(),
        records: Vec::new(),
        timings: Vec::new(),
        seed_log: Vec::new(),
        grad_log: Vec::new(),
    };
    let mut cumulative_wall = 0.0;
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let (_, samples) = timed_epoch::<_, EngineError, _>(group, |group, timer| {
            let batch_list = timer.time(Phase::DataLoad, || {
                batches(&data.train, effective_global, epoch, &recipe, shard)
            })?;
            if batch_list.is_empty() {
                return Err(EngineError::config(format!(
                    "training split of {} rows yields no batch of size {effective_global}",
                    data.train.len()
                )));
            }
            for (bi, batch) in batch_list.iter().enumerate() {
                let x = if cfg.augmentation.is_none() {
                    batch.inputs.clone()
                } else {
                    timer.time(Phase::DataLoad, || {
                        let seed = recipe.augment_seed(epoch as u64, bi as u64, role.aug_rank);
                        augment(&batch.inputs, &cfg.augmentation, seed)
                    })?
                };
                let loss_value = train_step(
                    &mut model,
                    params.as_mut_slice(),
                    &mut optimizer,
                    &x,
                    &batch.targets,
                    epoch,
                    bi,
                    cfg,
                    &role,
                    &recipe,
                    group,
                    timer,
                    &mut output,
                )
                .map_err(|e| numeric_guard(e, epoch, bi))?;
                last_loss = loss_value;
            }
            Ok(())
        })?;
        let epoch_total = samples
            .iter()
            .find(|s| s.phase == Phase::EpochTotal)
            .map(|s| s.seconds)
            .unwrap_or(0.0);
        cumulative_wall += epoch_total;
        if group.rank() == 0 {
            output.timings.push((epoch, samples));
        }

        if cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0 {
            let record = evaluate(
                &model,
                data,
                cfg,
                group,
                &recipe,
                epoch,
                cumulative_wall,
                last_loss,
            )?;
            if group.rank() == 0 {
                output.records.push(record);
            }
        }
    }

    group.barrier()?;
    output.model = model;
    output.final_params = params;
    Ok(output)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut BayesianModel,
    params: &mut [f64],
    optimizer: &mut Optimizer,
    x: &Tensor,
    y: &Tensor,
    epoch: usize,
    batch_index: usize,
    cfg: &TrainConfig,
    role: &WorkerRole,
    recipe: &SeedRecipe,
    group: &mut ProcessGroup,
    timer: &mut crate::metrics::PhaseTimer,
    output: &mut TrainOutput,
) -> Result<f64, EngineError> {
    let mut tape = Tape::new();
    let spec = &cfg.loss;

    // forward: stage parameters once, then one pass per owned sample
    let (staged, preds, kl) = timer.time(Phase::Forward, || {
        let staged = StagedModel::stage(model, &mut tape);
        let x_var = tape.leaf(x.clone());
        let mut preds = Vec::with_capacity(role.sample_range.len());
        for s in role.sample_range.clone() {
            let seed = recipe.sample_seed(epoch as u64, batch_index as u64, s as u64);
            if cfg.record_seeds {
                output.seed_log.push(seed);
            }
            let mut rng = recipe.sample_stream(epoch as u64, batch_index as u64, s as u64);
            let pred = forward_sampled(&mut tape, &staged, x_var, &mut NoiseStream::Rng(&mut rng))?;
            preds.push(pred);
        }
        let kl = if cfg.kl_weight > 0.0 && model.weight_mode == WeightMode::Variational {
            let raw = kl_to_standard_normal(&mut tape, &staged)?;
            Some(tape.scale(raw, cfg.kl_weight)?)
        } else {
            None
        };
        Ok::<_, EngineError>((staged, preds, kl))
    })?;

    let kl_value = kl.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let mut grads = vec![0.0; params.len()];
    let loss_value;

    match spec.aggregation {
        AggregationMode::Approximate => {
            let y_var = tape.leaf(y.clone());
            let loss = elbo_loss(&mut tape, &preds, y_var, kl, spec)?;
            loss_value = tape.value(loss).item();
            check_finite_loss(loss_value, kl_value, epoch, batch_index)?;
            timer.time(Phase::Backward, || tape.backward(loss))?;
            staged.accumulate_grads(&tape, &mut grads);
        }
        AggregationMode::Exact => {
            // for the cross-entropy kind the communicated statistic is the
            // class probability, so seeds attach to prob nodes
            let seed_vars: Vec<Var> = match spec.kind {
                LossKind::CrossEntropyOfMeanProb => preds
                    .iter()
                    .map(|&logits| {
                        let lsm = tape.log_softmax(logits)?;
                        tape.exp(lsm)
                    })
                    .collect::<Result<_, _>>()?,
                _ => preds.clone(),
            };
            let local_tensors: Vec<Tensor> =
                seed_vars.iter().map(|&v| tape.value(v).clone()).collect();
            let flat_local = flatten_stats(&SampleStatistics::from_samples(
                &local_tensors.iter().collect::<Vec<_>>(),
            )?)?;
            let merged = timer.time(Phase::Allreduce, || {
                group.allgather_statistics(&flat_local)
            })?;
            let shape = local_tensors[0].shape().to_vec();
            let global = SampleStatistics {
                mean: Tensor::new(shape.clone(), merged.mean.data().to_vec())?,
                second_moment: Tensor::new(shape, merged.second_moment.data().to_vec())?,
                count: merged.count,
            };
            let seeds = exact_distributed_loss_gradient(
                &local_tensors,
                y,
                &global,
                spec,
                cfg.samples,
            )?;
            loss_value = loss_value_from_stats(&global, y, spec)?
                + kl_value / spec.dataset_size as f64;
            check_finite_loss(loss_value, kl_value, epoch, batch_index)?;

            // seeds carry 1/S_total; scale by P so the averaging allreduce
            // reconstructs the full sum over samples
            let world = cfg.world_size as f64;
            let scaled: Vec<Vec<f64>> = seeds
                .into_iter()
                .map(|s| s.into_iter().map(|g| g * world).collect())
                .collect();
            timer.time(Phase::Backward, || {
                let pairs: Vec<(Var, &[f64])> = seed_vars
                    .iter()
                    .zip(scaled.iter())
                    .map(|(&v, s)| (v, s.as_slice()))
                    .collect();
                tape.backward_seeded(&pairs)?;
                if let Some(kl) = kl {
                    let kl_term = tape.scale(kl, 1.0 / spec.dataset_size as f64)?;
                    tape.backward(kl_term)?;
                }
                Ok::<_, EngineError>(())
            })?;
            staged.accumulate_grads(&tape, &mut grads);
        }
    }

    let averaged = timer.time(Phase::Allreduce, || group.allreduce_average(&grads))?;
    if cfg.record_grads {
        output.grad_log.push(averaged.clone());
    }
    if let Some(bad) = averaged.iter().find(|g| !g.is_finite()) {
        return Err(EngineError::NumericAbort {
            epoch,
            batch: batch_index,
            detail: format!("non-finite gradient {bad} (loss {loss_value}, kl term {kl_value})"),
        });
    }

    timer.time(Phase::Optimizer, || {
        optimizer.step(params, &averaged);
        model.load_flat(params);
    });
    if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
        return Err(EngineError::NumericAbort {
            epoch,
            batch: batch_index,
            detail: format!("non-finite parameter {bad} after optimizer step (loss {loss_value})"),
        });
    }

    #[cfg(debug_assertions)]
    {
        // softplus keeps σ positive for every finite ρ; underflow to zero
        // is only reachable after divergence and is reported as such
        for layer in &model.layers {
            for rho in [&layer.weight.rho, &layer.bias.rho] {
                if !rho.data().iter().all(|&r| crate::tape::softplus(r) > 0.0) {
                    return Err(EngineError::NumericAbort {
                        epoch,
                        batch: batch_index,
                        detail: "σ underflowed to zero after the optimizer step".into(),
                    });
                }
            }
        }
        let checksum = param_checksum(params);
        let root_sum = timer.time(Phase::Allreduce, || group.broadcast(&[checksum], 0))?;
        if root_sum[0].to_bits() != checksum.to_bits() {
            return Err(EngineError::Desync(format!(
                "rank {} parameter checksum {:#x} diverged from rank 0 {:#x} at epoch {epoch}, batch {batch_index}",
                role.rank,
                checksum.to_bits(),
                root_sum[0].to_bits()
            )));
        }
    }

    Ok(loss_value)
}

/// Debug builds surface diverged forward values as tensor errors; report
/// them as the numeric abort they are, with the step that produced them.
fn numeric_guard(e: EngineError, epoch: usize, batch: usize) -> EngineError {
    use crate::losses::LossError;
    use crate::tensor::TensorError;
    let op = match &e {
        EngineError::Tensor(TensorError::NonFinite { op }) => Some(*op),
        EngineError::Loss(LossError::Tensor(TensorError::NonFinite { op })) => Some(*op),
        _ => None,
    };
    match op {
        Some(op) => EngineError::NumericAbort {
            epoch,
            batch,
            detail: format!("non-finite value produced by {op}"),
        },
        None => e,
    }
}

fn check_finite_loss(
    loss: f64,
    kl_value: f64,
    epoch: usize,
    batch: usize,
) -> Result<(), EngineError> {
    if !loss.is_finite() {
        return Err(EngineError::NumericAbort {
            epoch,
            batch,
            detail: format!("loss {loss} (kl term {kl_value})"),
        });
    }
    Ok(())
}

#[cfg(debug_assertions)]
fn param_checksum(params: &[f64]) -> f64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in params {
        h ^= p.to_bits();
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    // exchanged through the f64 payload; compared by bit pattern
    f64::from_bits(h)
}

fn flatten_stats(stats: &SampleStatistics) -> Result<SampleStatistics, EngineError> {
    Ok(SampleStatistics {
        mean: Tensor::new(vec![stats.mean.numel()], stats.mean.data().to_vec())?,
        second_moment: Tensor::new(
            vec![stats.second_moment.numel()],
            stats.second_moment.data().to_vec(),
        )?,
        count: stats.count,
    })
}

/// Row-wise softmax of logits, outside the tape.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Predictive statistics over the evaluation sample indices owned by this
/// rank, pooled across the group. Classification models contribute class
/// probabilities; regression models contribute raw outputs.
fn predictive_stats_group(
    model: &BayesianModel,
    x: &Tensor,
    cfg: &TrainConfig,
    group: &mut ProcessGroup,
    recipe: &SeedRecipe,
    epoch: usize,
) -> Result<SampleStatistics, EngineError> {
    let share = sample_share(cfg.eval_samples, group.rank(), group.world_size());
    let out_dim = model.output_dim();
    let n = x.rows() * out_dim;
    let local = if share.is_empty() {
        SampleStatistics::empty(&[n])
    } else {
        let mut outputs = Vec::with_capacity(share.len());
        for s in share {
            let mut tape = Tape::new();
            let staged = StagedModel::stage(model, &mut tape);
            let xv = tape.leaf(x.clone());
            let mut rng = recipe.eval_sample_stream(epoch as u64, s as u64);
            let y = forward_sampled(&mut tape, &staged, xv, &mut NoiseStream::Rng(&mut rng))?;
            let raw = tape.value(y).clone();
            outputs.push(match cfg.task {
                TaskKind::Regression => raw,
                TaskKind::Classification => softmax_rows(&raw),
            });
        }
        flatten_stats(&SampleStatistics::from_samples(
            &outputs.iter().collect::<Vec<_>>(),
        )?)?
    };
    let merged = group.allgather_statistics(&local)?;
    Ok(SampleStatistics {
        mean: Tensor::new(vec![x.rows(), out_dim], merged.mean.data().to_vec())?,
        second_moment: Tensor::new(vec![x.rows(), out_dim], merged.second_moment.data().to_vec())?,
        count: merged.count,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &BayesianModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
    group: &mut ProcessGroup,
    recipe: &SeedRecipe,
    epoch: usize,
    cumulative_wall: f64,
    train_loss: f64,
) -> Result<MetricsRecord, EngineError> {
    let stats = predictive_stats_group(model, &data.val.inputs, cfg, group, recipe, epoch)?;
    let targets = &data.val.targets;
    let (eval_metric, nll, mace_value) = match cfg.task {
        TaskKind::Regression => {
            let mse = stats
                .mean
                .data()
                .iter()
                .zip(targets.data())
                .map(|(m, t)| (m - t) * (m - t))
                .sum::<f64>()
                / targets.numel() as f64;
            let nll = gaussian_nll(&stats, targets, cfg.loss.variance_floor)?;
            let std = stats.std();
            let mace_value = mace(stats.mean.data(), &std, targets.data(), &default_levels())
                .map_err(|e| EngineError::config(e.to_string()))?;
            (mse, nll, mace_value)
        }
        TaskKind::Classification => {
            let labels: Vec<usize> = (0..targets.rows())
                .map(|r| argmax(targets.row(r)))
                .collect();
            let hits = (0..stats.mean.rows())
                .filter(|&r| argmax(stats.mean.row(r)) == labels[r])
                .count();
            let accuracy = hits as f64 / labels.len() as f64;
            let nll = classification_nll(&stats.mean, &labels)
                .map_err(|e| EngineError::config(e.to_string()))?;
            let mace_value = mace_classification(&stats.mean, &labels, 19)
                .map_err(|e| EngineError::config(e.to_string()))?;
            (accuracy, nll, mace_value)
        }
    };
    Ok(MetricsRecord {
        epoch,
        cumulative_wall_seconds: cumulative_wall,
        train_loss,
        eval_metric,
        nll,
        mace: mace_value,
        strategy: cfg.strategy.name().to_string(),
        world_size: cfg.world_size,
        samples: cfg.samples,
        global_batch_size: cfg.effective_global_batch(),
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}
