//! The `verify` subcommand: a fast oracle suite over the numeric core.
//! One line per check; exit success only when every check passes.

use bpar_core::collectives::socket::run_socket_workers;
use bpar_core::collectives::wire::{Opcode, WireMessage};
use bpar_core::collectives::{run_inproc_workers, DEFAULT_TIMEOUT};
use bpar_core::config::Config;
use bpar_core::data::{generate_synthetic_series, split_dataset, window, Augmentation, WindowSpec};
use bpar_core::losses::{elbo_loss, AggregationMode, LossKind, LossSpec, PerSampleKind};
use bpar_core::metrics::{default_levels, mace};
use bpar_core::optim::{OptimizerConfig, OptimizerKind};
use bpar_core::seed::SeedRecipe;
use bpar_core::tape::{softplus, softplus_inv, Tape};
use bpar_core::tensor::Tensor;
use bpar_core::trainers::{
    train, train_sequential, AugmentationMode, BatchMode, Strategy, TaskKind, TrainConfig,
};
use bpar_core::variational::{
    forward_sampled, kl_gaussian_scalar, kl_to_standard_normal, Activation, Architecture,
    BayesianModel, NoiseStream, StagedModel, WeightMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = fn(&Config) -> Result<String, String>;

pub fn run_all(cfg: &Config) -> bool {
    let checks: Vec<(&str, Check)> = vec![
        ("config-round-trip", config_round_trip),
        ("elbo-gradient-vs-finite-differences", gradcheck),
        ("kl-closed-form-vs-monte-carlo", kl_check),
        ("degenerate-p1-bit-exact", degenerate_check),
        ("linear-loss-commutation", linear_loss_check),
        ("exact-aggregation-gradients", exact_aggregation_check),
        ("geometric-mean-effect", geometric_mean_check),
        ("wire-golden-bytes", wire_check),
        ("transport-equivalence", transport_check),
        ("mace-self-consistency", mace_check),
    ];
    let mut all_ok = true;
    for (name, check) in checks {
        match check(cfg) {
            Ok(detail) => println!("check {name}: PASS ({detail})"),
            Err(detail) => {
                println!("check {name}: FAIL ({detail})");
                all_ok = false;
            }
        }
    }
    all_ok
}

fn config_round_trip(cfg: &Config) -> Result<String, String> {
    let manifest = cfg.manifest();
    let back = Config::parse(&manifest).map_err(|e| e.to_string())?;
    if back != *cfg {
        return Err("manifest did not re-parse to an equal config".into());
    }
    Ok("manifest re-parses to an equal config".into())
}

fn fixture_data() -> bpar_core::data::SplitDataset {
    let series = generate_synthetic_series(240, &[(1.0, 24.0, 0.0)], 0.05, 3);
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

fn fixture_model(seed: u64) -> BayesianModel {
    BayesianModel::build(
        &Architecture {
            input_dim: 6,
            hidden: vec![8],
            output_dim: 2,
            activation: Activation::Relu,
            weight_mode: WeightMode::Variational,
            dropout_p: None,
            sigma_scale: 1.0,
        },
        &SeedRecipe::new(seed),
    )
}

fn fixture_cfg(strategy: Strategy, world: usize, samples: usize) -> TrainConfig {
    TrainConfig {
        strategy,
        world_size: world,
        samples,
        sample_groups: 1,
        data_groups: 1,
        batch_size: 16,
        batch_mode: BatchMode::FixedGlobal,
        epochs: 1,
        base_seed: 5,
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

fn gradcheck(_cfg: &Config) -> Result<String, String> {
    let data = fixture_data();
    let recipe = SeedRecipe::new(17);
    let spec = LossSpec::new(LossKind::MseOfMean, AggregationMode::Approximate, 100);
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut model = fixture_model(40 + seed);
        let x = Tensor::new(
            vec![4, 6],
            data.train.inputs.data()[0..24].to_vec(),
        )
        .unwrap();
        let y = Tensor::new(vec![4, 2], data.train.targets.data()[0..8].to_vec()).unwrap();

        let eval = |model: &BayesianModel| -> f64 {
            let mut tape = Tape::new();
            let staged = StagedModel::stage(model, &mut tape);
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let preds: Vec<_> = (0..2)
                .map(|s| {
                    let mut rng = recipe.sample_stream(0, 0, s);
                    forward_sampled(&mut tape, &staged, xv, &mut NoiseStream::Rng(&mut rng))
                        .unwrap()
                })
                .collect();
            let kl = kl_to_standard_normal(&mut tape, &staged).unwrap();
            let loss = elbo_loss(&mut tape, &preds, yv, Some(kl), &spec).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let staged = StagedModel::stage(&model, &mut tape);
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let preds: Vec<_> = (0..2)
            .map(|s| {
                let mut rng = recipe.sample_stream(0, 0, s);
                forward_sampled(&mut tape, &staged, xv, &mut NoiseStream::Rng(&mut rng)).unwrap()
            })
            .collect();
        let kl = kl_to_standard_normal(&mut tape, &staged).unwrap();
        let loss = elbo_loss(&mut tape, &preds, yv, Some(kl), &spec).unwrap();
        tape.backward(loss).map_err(|e| e.to_string())?;
        let mut analytic = vec![0.0; model.param_count()];
        staged.accumulate_grads(&tape, &mut analytic);

        let h = 1e-5;
        let flat = model.to_flat();
        for i in (0..flat.len()).step_by(11) {
            let mut fp = flat.clone();
            fp[i] += h;
            model.load_flat(&fp);
            let up = eval(&model);
            fp[i] -= 2.0 * h;
            model.load_flat(&fp);
            let down = eval(&model);
            model.load_flat(&flat);
            let fd = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
            let rel = (analytic[i] - fd).abs() / denom;
            worst = worst.max(rel);
            if rel >= 1e-4 {
                return Err(format!("seed {seed} param {i}: rel error {rel}"));
            }
        }
    }
    Ok(format!("worst relative error {worst:.2e} < 1e-4"))
}

fn kl_check(_cfg: &Config) -> Result<String, String> {
    if kl_gaussian_scalar(0.0, 1.0) != 0.0 {
        return Err("KL(N(0,1) ‖ N(0,1)) must be exactly 0".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let mu: f64 = rng.gen_range(-1.0..1.0);
        let sigma: f64 = rng.gen_range(0.1..2.0);
        let cf = kl_gaussian_scalar(mu, sigma);
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let z: f64 = rng.sample(StandardNormal);
            let w = mu + sigma * z;
            acc += -(w - mu) * (w - mu) / (2.0 * sigma * sigma) - sigma.ln() + w * w / 2.0;
        }
        let mc = acc / draws as f64;
        worst = worst.max((mc - cf).abs());
        if (mc - cf).abs() >= 0.01 {
            return Err(format!("mu={mu:.3} sigma={sigma:.3}: |{cf} - {mc}| >= 0.01"));
        }
    }
    Ok(format!("worst |closed-form − MC| {worst:.4} < 0.01"))
}

fn degenerate_check(_cfg: &Config) -> Result<String, String> {
    let data = fixture_data();
    let model = fixture_model(3);
    let seq = train_sequential(&model, &data, &fixture_cfg(Strategy::Sequential, 1, 4))
        .map_err(|e| e.to_string())?;
    for strategy in [Strategy::SampleParallel, Strategy::DataParallel, Strategy::Hybrid] {
        let out = train(&model, &data, &fixture_cfg(strategy, 1, 4)).map_err(|e| e.to_string())?;
        if out.final_params != seq.final_params {
            return Err(format!("{} differs from sequential at P=1", strategy.name()));
        }
    }
    Ok("all strategies bit-exact at P=1".into())
}

fn linear_loss_check(_cfg: &Config) -> Result<String, String> {
    let data = fixture_data();
    let model = fixture_model(4);
    let mut cfg_seq = fixture_cfg(Strategy::Sequential, 1, 8);
    cfg_seq.epochs = 2;
    let seq = train_sequential(&model, &data, &cfg_seq).map_err(|e| e.to_string())?;
    let mut cfg_par = fixture_cfg(Strategy::SampleParallel, 2, 8);
    cfg_par.epochs = 2;
    let par = train(&model, &data, &cfg_par).map_err(|e| e.to_string())?;
    let worst = seq
        .final_params
        .iter()
        .zip(&par.final_params)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-9))
        .fold(0.0f64, f64::max);
    if worst >= 1e-9 {
        return Err(format!("relative parameter gap {worst:.2e} >= 1e-9"));
    }
    Ok(format!("P=2 matches sequential within {worst:.2e}"))
}

fn exact_aggregation_check(_cfg: &Config) -> Result<String, String> {
    let data = fixture_data();
    let model = fixture_model(5);
    let mut cfg_seq = fixture_cfg(Strategy::Sequential, 1, 4);
    cfg_seq.loss.kind = LossKind::MseOfMean;
    cfg_seq.record_grads = true;
    let seq = train_sequential(&model, &data, &cfg_seq).map_err(|e| e.to_string())?;

    let mut cfg_par = fixture_cfg(Strategy::SampleParallel, 2, 4);
    cfg_par.loss.kind = LossKind::MseOfMean;
    cfg_par.loss.aggregation = AggregationMode::Exact;
    cfg_par.record_grads = true;
    let par = train(&model, &data, &cfg_par).map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    for (gs, gp) in seq.grad_log.iter().zip(&par.grad_log) {
        let num = gs
            .iter()
            .zip(gp)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = gs.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    if worst >= 1e-10 {
        return Err(format!("relative gradient gap {worst:.2e} >= 1e-10"));
    }
    Ok(format!("exact mode matches sequential within {worst:.2e}"))
}

fn geometric_mean_check(_cfg: &Config) -> Result<String, String> {
    let probs = [0.5f64, 0.125];
    let spec = LossSpec::new(
        LossKind::CrossEntropyOfMeanProb,
        AggregationMode::Approximate,
        100,
    );
    let mut acc = 0.0;
    for &p in &probs {
        let mut tape = Tape::new();
        let logits = tape
            .leaf(Tensor::new(vec![1, 2], vec![p.ln(), (1.0 - p).ln()]).unwrap());
        let onehot = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let loss = elbo_loss(&mut tape, &[logits], onehot, None, &spec)
            .map_err(|e| e.to_string())?;
        acc += tape.value(loss).item();
    }
    let avg = acc / probs.len() as f64;
    let expected = -(probs[0] * probs[1]).sqrt().ln();
    if (avg - expected).abs() >= 1e-12 {
        return Err(format!("{avg} vs −ln geomean {expected}"));
    }
    if (avg - 1.386294).abs() >= 1e-6 {
        return Err(format!("worked instance {avg} != 1.386294"));
    }
    Ok(format!("averaged loss {avg:.6} = −ln(geometric mean)"))
}

fn wire_check(_cfg: &Config) -> Result<String, String> {
    let msg = WireMessage::new(Opcode::Allreduce, 1, 2, vec![1.0, 2.0]);
    let bytes = msg.encode();
    let expected: Vec<u8> = vec![
        0x42, 0x50, 0x41, 0x52, 0x01, 0x01, 0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00,
        0x10, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
        0xF0, 0x3F, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x40,
    ];
    if bytes != expected {
        return Err("encoded frame does not match the golden byte vector".into());
    }
    let back = WireMessage::decode(&bytes).map_err(|e| e.to_string())?;
    if back != msg {
        return Err("decode(encode(frame)) != frame".into());
    }
    Ok("golden frame matches, round-trip exact".into())
}

fn transport_check(_cfg: &Config) -> Result<String, String> {
    let world = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let buffers: Vec<Vec<Vec<f64>>> = (0..50)
        .map(|_| {
            (0..world)
                .map(|_| (0..16).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect()
        })
        .collect();

    let run = |socket: bool| -> Result<Vec<Vec<f64>>, String> {
        let body = |rank: usize,
                    group: &mut bpar_core::collectives::ProcessGroup|
         -> Result<Vec<Vec<f64>>, bpar_core::EngineError> {
            let mut outs = Vec::new();
            for case in &buffers {
                outs.push(group.allreduce_average(&case[rank])?);
            }
            Ok(outs)
        };
        let results = if socket {
            run_socket_workers(world, 42321, DEFAULT_TIMEOUT, body)
        } else {
            run_inproc_workers(world, DEFAULT_TIMEOUT, body)
        };
        results
            .into_iter()
            .next()
            .unwrap()
            .map_err(|e| e.to_string())
    };

    let inproc = run(false)?;
    let socket = run(true)?;
    for (a, b) in inproc.iter().zip(&socket) {
        for (x, y) in a.iter().zip(b) {
            if x.to_bits() != y.to_bits() {
                return Err(format!("transports disagree: {x} vs {y}"));
            }
        }
    }
    Ok("50 random allreduces bit-identical across transports".into())
}

fn mace_check(_cfg: &Config) -> Result<String, String> {
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let m: f64 = rng.gen_range(-2.0..2.0);
        let s: f64 = rng.gen_range(0.1..1.5);
        let z: f64 = rng.sample(StandardNormal);
        mean.push(m);
        std.push(s);
        targets.push(m + s * z);
    }
    let v = mace(&mean, &std, &targets, &default_levels()).map_err(|e| e.to_string())?;
    if v >= 0.01 {
        return Err(format!("self-consistency MACE {v} >= 0.01"));
    }
    // a sanity anchor for the softplus inversion used throughout
    if (softplus(softplus_inv(1.0)) - 1.0).abs() > 1e-12 {
        return Err("softplus inversion drifted".into());
    }
    Ok(format!("MACE {v:.4} on calibrated synthetic predictions"))
}
