//! Cross-strategy equivalence oracles: the sequential trainer is the
//! reference implementation, and every parallel engine must reproduce it
//! in its exactness regime.

use bpar_core::collectives::{run_inproc_workers, DEFAULT_TIMEOUT};
use bpar_core::data::{augment, generate_synthetic_series, split_dataset, window, Augmentation,
    SplitDataset, WindowSpec};
use bpar_core::losses::{AggregationMode, LossKind, LossSpec, PerSampleKind};
use bpar_core::optim::{OptimizerConfig, OptimizerKind};
use bpar_core::seed::SeedRecipe;
use bpar_core::trainers::{
    role_for, train, train_sequential, train_worker, AugmentationMode, BatchMode, Strategy,
    TaskKind, TrainConfig,
};
use bpar_core::variational::{Activation, Architecture, BayesianModel, WeightMode};
use bpar_core::EngineError;

fn tiny_data() -> SplitDataset {
    let series = generate_synthetic_series(260, &[(1.0, 24.0, 0.0), (0.3, 7.0, 0.5)], 0.05, 11);
    let ds = window(
        &series,
        &WindowSpec {
            history: 6,
            horizon: 2,
            stride: 1,
        },
    )
    .unwrap();
    split_dataset(&ds, 0.1).unwrap()
}

fn tiny_model(seed: u64) -> BayesianModel {
    BayesianModel::build(
        &Architecture {
            input_dim: 6,
            hidden: vec![8, 8],
            output_dim: 2,
            activation: Activation::Relu,
            weight_mode: WeightMode::Variational,
            dropout_p: None,
            sigma_scale: 1.0,
        },
        &SeedRecipe::new(seed),
    )
}

fn base_cfg(strategy: Strategy, world: usize, samples: usize) -> TrainConfig {
    TrainConfig {
        strategy,
        world_size: world,
        samples,
        sample_groups: 1,
        data_groups: 1,
        batch_size: 16,
        batch_mode: BatchMode::FixedGlobal,
        epochs: 2,
        base_seed: 99,
        loss: LossSpec::new(
            LossKind::MeanOfPerSample(PerSampleKind::Mse),
            AggregationMode::Approximate,
            200,
        ),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-2,
            ..OptimizerConfig::default()
        },
        augmentation: Augmentation::None,
        augmentation_mode: AugmentationMode::Shared,
        kl_weight: 1.0,
        task: TaskKind::Regression,
        eval_samples: 4,
        eval_interval: 0,
        record_seeds: false,
        record_grads: false,
    }
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-9))
        .fold(0.0, f64::max)
}

#[test]
fn degenerate_world_reproduces_sequential_bit_exactly() {
    let data = tiny_data();
    let model = tiny_model(1);
    let seq = train_sequential(&model, &data, &base_cfg(Strategy::Sequential, 1, 4)).unwrap();

    for strategy in [Strategy::SampleParallel, Strategy::DataParallel, Strategy::Hybrid] {
        let cfg = base_cfg(strategy, 1, 4);
        let out = train(&model, &data, &cfg).unwrap();
        assert_eq!(
            seq.final_params, out.final_params,
            "{} at P=1 must be bit-exact",
            strategy.name()
        );
    }
}

#[test]
fn linear_loss_strategies_agree() {
    let data = tiny_data();
    let model = tiny_model(2);
    let mut cfg = base_cfg(Strategy::Sequential, 1, 8);
    cfg.epochs = 3;
    let seq = train_sequential(&model, &data, &cfg).unwrap();

    let runs: Vec<(Strategy, usize, usize, usize)> = vec![
        (Strategy::SampleParallel, 2, 1, 1),
        (Strategy::SampleParallel, 4, 1, 1),
        (Strategy::DataParallel, 2, 1, 1),
        (Strategy::Hybrid, 4, 2, 2),
    ];
    for (strategy, world, k, g) in runs {
        let mut cfg = base_cfg(strategy, world, 8);
        cfg.epochs = 3;
        cfg.sample_groups = k;
        cfg.data_groups = g;
        let out = train(&model, &data, &cfg).unwrap();
        let diff = max_rel_diff(&seq.final_params, &out.final_params);
        assert!(
            diff < 1e-9,
            "{} P={world}: relative diff {diff}",
            strategy.name()
        );
    }
}

#[test]
fn exact_aggregation_reproduces_sequential_gradients() {
    let data = tiny_data();
    for kind in [LossKind::MseOfMean, LossKind::GaussianNll] {
        let model = tiny_model(3);
        let mut seq_cfg = base_cfg(Strategy::Sequential, 1, 4);
        seq_cfg.loss.kind = kind;
        seq_cfg.epochs = 1;
        seq_cfg.record_grads = true;
        let seq = train_sequential(&model, &data, &seq_cfg).unwrap();

        let mut par_cfg = base_cfg(Strategy::SampleParallel, 2, 4);
        par_cfg.loss.kind = kind;
        par_cfg.loss.aggregation = AggregationMode::Exact;
        par_cfg.epochs = 1;
        par_cfg.record_grads = true;
        let par = train(&model, &data, &par_cfg).unwrap();

        assert_eq!(seq.grad_log.len(), par.grad_log.len());
        for (step, (gs, gp)) in seq.grad_log.iter().zip(&par.grad_log).enumerate() {
            let num: f64 = gs
                .iter()
                .zip(gp)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = gs.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(
                num / den < 1e-10,
                "{kind:?} step {step}: relative gradient gap {}",
                num / den
            );
        }

        // approximate mode on the same nonlinear loss must exhibit a gap
        let mut approx_cfg = par_cfg.clone();
        approx_cfg.loss.aggregation = AggregationMode::Approximate;
        let approx = train(&model, &data, &approx_cfg).unwrap();
        let gs = &seq.grad_log[0];
        let ga = &approx.grad_log[0];
        let num: f64 = gs
            .iter()
            .zip(ga)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = gs.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(
            num / den > 1e-12,
            "{kind:?}: approximate aggregation shows no gap, which would make exact mode pointless"
        );
    }
}

// Independent deterministic-MLP trainer: explicit forward/backward for a
// relu MLP with Adam, no tape involved.
mod det_oracle {
    pub struct DetMlp {
        pub w: Vec<Vec<f64>>, // row-major [in×out] per layer
        pub b: Vec<Vec<f64>>,
        pub dims: Vec<usize>,
    }

    pub struct Adam {
        pub lr: f64,
        pub b1: f64,
        pub b2: f64,
        pub eps: f64,
        pub t: i32,
        pub m: Vec<f64>,
        pub v: Vec<f64>,
    }

    impl Adam {
        pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
            self.t += 1;
            let bc1 = 1.0 - self.b1.powi(self.t);
            let bc2 = 1.0 - self.b2.powi(self.t);
            for i in 0..params.len() {
                self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grads[i];
                self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grads[i] * grads[i];
                params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            }
        }
    }

    fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    impl DetMlp {
        /// One full-batch gradient step; returns flattened per-layer grads.
        pub fn gradients(&self, x: &[f64], y: &[f64], batch: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let layers = self.w.len();
            let mut acts = vec![x.to_vec()]; // post-activation inputs per layer
            let mut pre = Vec::new();
            for l in 0..layers {
                let (i_dim, o_dim) = (self.dims[l], self.dims[l + 1]);
                let mut h = matmul(&acts[l], &self.w[l], batch, i_dim, o_dim);
                for r in 0..batch {
                    for c in 0..o_dim {
                        h[r * o_dim + c] += self.b[l][c];
                    }
                }
                pre.push(h.clone());
                let a = if l + 1 == layers {
                    h
                } else {
                    h.iter().map(|v| v.max(0.0)).collect()
                };
                acts.push(a);
            }
            let out_dim = self.dims[layers];
            let n_el = (batch * out_dim) as f64;
            // L = mean((out − y)²); dL/dout = 2(out − y)/n
            let mut delta: Vec<f64> = acts[layers]
                .iter()
                .zip(y)
                .map(|(o, t)| 2.0 * (o - t) / n_el)
                .collect();
            let mut dw = vec![Vec::new(); layers];
            let mut db = vec![Vec::new(); layers];
            for l in (0..layers).rev() {
                let (i_dim, o_dim) = (self.dims[l], self.dims[l + 1]);
                // dW = actsᵀ · delta
                let mut g = vec![0.0; i_dim * o_dim];
                for r in 0..batch {
                    for i in 0..i_dim {
                        for o in 0..o_dim {
                            g[i * o_dim + o] += acts[l][r * i_dim + i] * delta[r * o_dim + o];
                        }
                    }
                }
                dw[l] = g;
                let mut gb = vec![0.0; o_dim];
                for r in 0..batch {
                    for o in 0..o_dim {
                        gb[o] += delta[r * o_dim + o];
                    }
                }
                db[l] = gb;
                if l > 0 {
                    // delta_prev = (delta · Wᵀ) ⊙ relu'(pre[l-1])
                    let mut prev = vec![0.0; batch * i_dim];
                    for r in 0..batch {
                        for i in 0..i_dim {
                            let mut acc = 0.0;
                            for o in 0..o_dim {
                                acc += delta[r * o_dim + o] * self.w[l][i * o_dim + o];
                            }
                            prev[r * i_dim + i] =
                                if pre[l - 1][r * i_dim + i] > 0.0 { acc } else { 0.0 };
                        }
                    }
                    delta = prev;
                }
            }
            (dw, db)
        }
    }
}

#[test]
fn collapsed_sigma_matches_deterministic_trainer() {
    // S=1, σ_init → 0, KL weight 0: the variational trainer must follow a
    // plain deterministic MLP trajectory on the same seed.
    let data = tiny_data();
    let arch = Architecture {
        input_dim: 6,
        hidden: vec![8],
        output_dim: 2,
        activation: Activation::Relu,
        weight_mode: WeightMode::Variational,
        dropout_p: None,
        sigma_scale: 1e-300, // σ so small that μ + σ·ε == μ in f64
    };
    let model = BayesianModel::build(&arch, &SeedRecipe::new(7));
    let mut cfg = base_cfg(Strategy::Sequential, 1, 1);
    cfg.loss.kind = LossKind::MseOfMean;
    cfg.kl_weight = 0.0;
    cfg.epochs = 2;
    let out = train_sequential(&model, &data, &cfg).unwrap();

    // oracle: same initial weights, same batches, hand-rolled backward
    let mut mlp = det_oracle::DetMlp {
        w: model.layers.iter().map(|l| l.weight.mu.data().to_vec()).collect(),
        b: model.layers.iter().map(|l| l.bias.mu.data().to_vec()).collect(),
        dims: vec![6, 8, 2],
    };
    let n_params: usize = mlp.w.iter().map(|w| w.len()).sum::<usize>()
        + mlp.b.iter().map(|b| b.len()).sum::<usize>();
    let mut adam = det_oracle::Adam {
        lr: cfg.optimizer.learning_rate,
        b1: cfg.optimizer.beta1,
        b2: cfg.optimizer.beta2,
        eps: cfg.optimizer.eps,
        t: 0,
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
    };
    let recipe = SeedRecipe::new(cfg.base_seed);
    for epoch in 0..cfg.epochs {
        let batch_list =
            bpar_core::data::batches(&data.train, cfg.batch_size, epoch, &recipe, None).unwrap();
        for batch in &batch_list {
            let rows = batch.inputs.rows();
            let (dw, db) = mlp.gradients(batch.inputs.data(), batch.targets.data(), rows);
            // flatten in the same order as the engine: per layer w then b
            let mut params = Vec::with_capacity(n_params);
            let mut grads = Vec::with_capacity(n_params);
            for l in 0..mlp.w.len() {
                params.extend_from_slice(&mlp.w[l]);
                grads.extend_from_slice(&dw[l]);
                params.extend_from_slice(&mlp.b[l]);
                grads.extend_from_slice(&db[l]);
            }
            adam.step(&mut params, &grads);
            let mut at = 0;
            for l in 0..mlp.w.len() {
                let wn = mlp.w[l].len();
                mlp.w[l].copy_from_slice(&params[at..at + wn]);
                at += wn;
                let bn = mlp.b[l].len();
                mlp.b[l].copy_from_slice(&params[at..at + bn]);
                at += bn;
            }
        }
    }

    for (l, layer) in out.model.layers.iter().enumerate() {
        let diff_w = max_rel_diff(layer.weight.mu.data(), &mlp.w[l]);
        let diff_b = max_rel_diff(layer.bias.mu.data(), &mlp.b[l]);
        assert!(diff_w < 1e-10, "layer {l} weights diff {diff_w}");
        assert!(diff_b < 1e-10, "layer {l} biases diff {diff_b}");
    }
}

#[test]
fn smoke_loss_decreases_on_sinusoid() {
    let data = tiny_data();
    let model = tiny_model(4);
    let mut cfg = base_cfg(Strategy::Sequential, 1, 4);
    cfg.loss.kind = LossKind::MseOfMean;
    cfg.epochs = 6;
    cfg.eval_interval = 1;
    let out = train_sequential(&model, &data, &cfg).unwrap();
    assert!(out.records.len() >= 2);
    let first = out.records.first().unwrap().train_loss;
    let last = out.records.last().unwrap().train_loss;
    assert!(
        last < first,
        "loss should decrease over training: {first} → {last}"
    );
    let wall: Vec<f64> = out
        .records
        .iter()
        .map(|r| r.cumulative_wall_seconds)
        .collect();
    assert!(
        wall.windows(2).all(|w| w[1] > w[0]),
        "cumulative wall time must strictly increase: {wall:?}"
    );
}

#[test]
fn identical_config_is_bit_identical() {
    let data = tiny_data();
    let model = tiny_model(5);
    let cfg = base_cfg(Strategy::SampleParallel, 2, 4);
    let a = train(&model, &data, &cfg).unwrap();
    let b = train(&model, &data, &cfg).unwrap();
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn sample_seed_multiset_is_strategy_invariant() {
    let data = tiny_data();
    let model = tiny_model(6);
    let collect_seeds = |strategy: Strategy, world: usize, k: usize, g: usize| {
        let mut cfg = base_cfg(strategy, world, 8);
        cfg.sample_groups = k;
        cfg.data_groups = g;
        cfg.epochs = 1;
        cfg.record_seeds = true;
        // gather the union of seeds from every worker
        cfg.validate().unwrap();
        let results = run_inproc_workers(world, DEFAULT_TIMEOUT, |_rank, group| {
            let out = train_worker(&model, &data, &cfg, group)?;
            Ok(out.seed_log)
        });
        let mut all: Vec<u64> = Vec::new();
        for r in results {
            all.extend(r.unwrap());
        }
        all.sort_unstable();
        all.dedup();
        all
    };
    let seq = collect_seeds(Strategy::Sequential, 1, 1, 1);
    let sp = collect_seeds(Strategy::SampleParallel, 4, 1, 1);
    let dp = collect_seeds(Strategy::DataParallel, 2, 1, 1);
    let hy = collect_seeds(Strategy::Hybrid, 4, 2, 2);
    assert_eq!(seq, sp, "sample-parallel consumes the same seed set");
    assert_eq!(seq, dp, "data-parallel consumes the same seed set");
    assert_eq!(seq, hy, "hybrid consumes the same seed set");
}

#[test]
fn augmentation_mode_controls_cross_rank_diversity() {
    // what each rank applies to its copy of a batch, per role derivation
    let recipe = SeedRecipe::new(123);
    let batch = tiny_data().train.inputs;
    let aug = Augmentation::AdditiveJitter { scale: 0.1 };

    let mut independent = Vec::new();
    let mut shared = Vec::new();
    for rank in 0..4usize {
        let mut cfg = base_cfg(Strategy::SampleParallel, 4, 8);
        cfg.augmentation_mode = AugmentationMode::IndependentPerWorker;
        let role = role_for(&cfg, rank);
        independent.push(
            augment(&batch, &aug, recipe.augment_seed(0, 0, role.aug_rank)).unwrap(),
        );
        cfg.augmentation_mode = AugmentationMode::Shared;
        let role = role_for(&cfg, rank);
        shared.push(augment(&batch, &aug, recipe.augment_seed(0, 0, role.aug_rank)).unwrap());
    }
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(
                independent[i].data(),
                independent[j].data(),
                "independent augmentation must differ across ranks {i},{j}"
            );
            assert_eq!(
                shared[i].data(),
                shared[j].data(),
                "shared augmentation must be bit-identical across ranks {i},{j}"
            );
        }
    }
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let data = tiny_data();
    let model = tiny_model(8);
    let mut cfg = base_cfg(Strategy::Sequential, 1, 2);
    cfg.loss.kind = LossKind::MseOfMean;
    cfg.optimizer.kind = OptimizerKind::Sgd;
    cfg.optimizer.learning_rate = 1e18; // divergence on the second step
    cfg.epochs = 3;
    match train_sequential(&model, &data, &cfg) {
        Err(e @ EngineError::NumericAbort { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
            assert_eq!(e.exit_code(), 4);
        }
        other => panic!("expected numeric abort, got {other:?}"),
    }
}

#[test]
fn socket_training_matches_inproc_bitwise() {
    let data = tiny_data();
    let model = tiny_model(9);
    let mut cfg = base_cfg(Strategy::SampleParallel, 2, 4);
    cfg.epochs = 1;
    let inproc = train(&model, &data, &cfg).unwrap();

    let results = bpar_core::collectives::socket::run_socket_workers(
        2,
        41950,
        DEFAULT_TIMEOUT,
        |_rank, group| train_worker(&model, &data, &cfg, group),
    );
    for r in results {
        let out = r.unwrap();
        assert_eq!(
            out.final_params, inproc.final_params,
            "socket transport must be bit-identical to in-process"
        );
    }
}

#[test]
fn mc_dropout_training_runs_under_all_strategies() {
    let data = tiny_data();
    let arch = Architecture {
        input_dim: 6,
        hidden: vec![8, 8],
        output_dim: 2,
        activation: Activation::Relu,
        weight_mode: WeightMode::MeanOnly,
        dropout_p: Some(0.1),
        sigma_scale: 1.0,
    };
    let model = BayesianModel::build(&arch, &SeedRecipe::new(10));
    let mut seq_cfg = base_cfg(Strategy::Sequential, 1, 4);
    seq_cfg.kl_weight = 0.0;
    seq_cfg.epochs = 1;
    let seq = train_sequential(&model, &data, &seq_cfg).unwrap();

    let mut sp_cfg = base_cfg(Strategy::SampleParallel, 2, 4);
    sp_cfg.kl_weight = 0.0;
    sp_cfg.epochs = 1;
    let sp = train(&model, &data, &sp_cfg).unwrap();
    let diff = max_rel_diff(&seq.final_params, &sp.final_params);
    assert!(
        diff < 1e-9,
        "mask-sample parallelism with a linear loss commutes: {diff}"
    );
}

#[test]
fn hybrid_degenerate_grids_match_their_pure_strategies() {
    let data = tiny_data();
    let model = tiny_model(12);

    // G = 1: the grid is pure sample parallelism
    let mut sp = base_cfg(Strategy::SampleParallel, 2, 8);
    sp.augmentation_mode = AugmentationMode::IndependentPerWorker;
    let sp_out = train(&model, &data, &sp).unwrap();
    let mut hy = base_cfg(Strategy::Hybrid, 2, 8);
    hy.sample_groups = 2;
    hy.data_groups = 1;
    hy.augmentation_mode = AugmentationMode::IndependentPerWorker;
    let hy_out = train(&model, &data, &hy).unwrap();
    assert_eq!(sp_out.final_params, hy_out.final_params, "G=1 grid == sample_parallel");

    // K = 1: the grid is pure data parallelism
    let dp = base_cfg(Strategy::DataParallel, 2, 8);
    let dp_out = train(&model, &data, &dp).unwrap();
    let mut hy = base_cfg(Strategy::Hybrid, 2, 8);
    hy.sample_groups = 1;
    hy.data_groups = 2;
    let hy_out = train(&model, &data, &hy).unwrap();
    assert_eq!(dp_out.final_params, hy_out.final_params, "K=1 grid == data_parallel");
}

#[test]
fn fixed_local_records_effective_global_batch() {
    let data = tiny_data();
    let model = tiny_model(13);
    let mut cfg = base_cfg(Strategy::DataParallel, 2, 4);
    cfg.batch_mode = BatchMode::FixedLocal;
    cfg.batch_size = 8; // local batch b → effective global 2b
    cfg.eval_interval = 1;
    let out = train(&model, &data, &cfg).unwrap();
    assert_eq!(cfg.effective_global_batch(), 16);
    assert!(out.records.iter().all(|r| r.global_batch_size == 16));
}

#[test]
fn exact_aggregation_covers_cross_entropy() {
    // classification counterpart of the exact-mode oracle: statistics are
    // the per-class mean probabilities
    let grid_train = bpar_core::data::generate_pattern_grid(64, 0.3, 21);
    let grid_val = bpar_core::data::generate_pattern_grid(64, 0.3, 22);
    let data = SplitDataset {
        train: grid_train,
        val: grid_val,
    };
    let model = BayesianModel::build(
        &Architecture {
            input_dim: 64,
            hidden: vec![8],
            output_dim: 2,
            activation: Activation::Relu,
            weight_mode: WeightMode::Variational,
            dropout_p: None,
            sigma_scale: 1.0,
        },
        &SeedRecipe::new(23),
    );
    let mut seq_cfg = base_cfg(Strategy::Sequential, 1, 4);
    seq_cfg.loss.kind = LossKind::CrossEntropyOfMeanProb;
    seq_cfg.task = TaskKind::Classification;
    seq_cfg.epochs = 1;
    seq_cfg.record_grads = true;
    let seq = train_sequential(&model, &data, &seq_cfg).unwrap();

    let mut par_cfg = seq_cfg.clone();
    par_cfg.strategy = Strategy::SampleParallel;
    par_cfg.world_size = 2;
    par_cfg.loss.aggregation = AggregationMode::Exact;
    let par = train(&model, &data, &par_cfg).unwrap();

    assert_eq!(seq.grad_log.len(), par.grad_log.len());
    for (gs, gp) in seq.grad_log.iter().zip(&par.grad_log) {
        let num: f64 = gs.iter().zip(gp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = gs.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(num / den < 1e-10, "cross-entropy exact-mode gap {}", num / den);
    }
}
