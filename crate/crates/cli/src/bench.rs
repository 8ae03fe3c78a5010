//! Scaling sweeps. Every sweep point emits a CSV row even when it fails,
//! with a status column, so partial sweeps stay analyzable.

use std::fmt::Write as _;
use std::path::Path;

use bpar_core::config::Config;
use bpar_core::metrics::{efficiency, speedup, Phase};
use bpar_core::trainers::{train, BatchMode, Strategy, TrainConfig};
use bpar_core::EngineError;

/// Median per-epoch wall seconds over `runs` repetitions of a fresh
/// training run.
fn measure(cfg: &Config, train_cfg: &TrainConfig, runs: usize) -> Result<f64, EngineError> {
    let data = cfg.build_dataset()?;
    let model = cfg.build_model(&data)?;
    let mut epoch_times = Vec::new();
    for _ in 0..runs.max(1) {
        let output = train(&model, &data, train_cfg)?;
        let mean_epoch = output
            .timings
            .iter()
            .flat_map(|(_, samples)| samples.iter())
            .filter(|s| s.phase == Phase::EpochTotal)
            .map(|s| s.seconds)
            .sum::<f64>()
            / output.timings.len().max(1) as f64;
        epoch_times.push(mean_epoch);
    }
    epoch_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(epoch_times[epoch_times.len() / 2])
}

fn point_config(cfg: &Config, strategy: Strategy, world: usize, samples: usize, mode: BatchMode) -> Result<TrainConfig, EngineError> {
    let data_len = cfg.build_dataset()?.train.len();
    let mut tc = cfg.train_config(data_len)?;
    tc.strategy = strategy;
    tc.world_size = world;
    tc.samples = samples;
    tc.batch_mode = mode;
    tc.epochs = cfg.bench.epochs_per_point.max(1);
    tc.eval_interval = 0;
    match strategy {
        Strategy::Hybrid => {
            // widest sample axis that divides both P and S
            let mut k = 1;
            for cand in (1..=world).rev() {
                if world.is_multiple_of(cand) && samples.is_multiple_of(cand) {
                    k = cand;
                    break;
                }
            }
            tc.sample_groups = k;
            tc.data_groups = world / k;
        }
        _ => {
            tc.sample_groups = 1;
            tc.data_groups = 1;
        }
    }
    tc.validate()?;
    Ok(tc)
}

fn write_csv(path: &Path, content: &str) -> Result<(), EngineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| EngineError::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, content).map_err(|e| EngineError::io(path.display().to_string(), e))
}

/// Fixed-sample scaling: S constant, P swept, both batch modes, all three
/// parallel strategies; speedup against the sequential baseline.
pub fn bench_fixed(cfg: &Config, out: &Path) -> Result<(), EngineError> {
    let samples = cfg.train.samples;
    let runs = cfg.bench.runs.max(1);
    let mut csv = String::from("# bpar-bench-fixed-v1\nstrategy,batch_mode,world_size,samples,median_epoch_seconds,speedup,status\n");

    let baseline = point_config(cfg, Strategy::Sequential, 1, samples, BatchMode::FixedGlobal)
        .and_then(|tc| measure(cfg, &tc, runs));
    let t1 = match &baseline {
        Ok(t) => {
            let _ = writeln!(csv, "sequential,fixed_global,1,{samples},{t},1.0,ok");
            *t
        }
        Err(e) => {
            let _ = writeln!(csv, "sequential,fixed_global,1,{samples},,,error: {e}");
            write_csv(&out.join("bench-fixed.csv"), &csv)?;
            return Err(EngineError::config(format!("sequential baseline failed: {e}")));
        }
    };

    for strategy in [Strategy::SampleParallel, Strategy::DataParallel, Strategy::Hybrid] {
        for mode in [BatchMode::FixedGlobal, BatchMode::FixedLocal] {
            for &world in &cfg.bench.worker_counts {
                let mode_name = match mode {
                    BatchMode::FixedGlobal => "fixed_global",
                    BatchMode::FixedLocal => "fixed_local",
                };
                match point_config(cfg, strategy, world, samples, mode)
                    .and_then(|tc| measure(cfg, &tc, runs))
                {
                    Ok(tp) => {
                        let s = speedup(t1, tp).map_err(|e| EngineError::config(e.to_string()))?;
                        let _ = writeln!(
                            csv,
                            "{},{mode_name},{world},{samples},{tp},{s},ok",
                            strategy.name()
                        );
                        println!(
                            "bench-fixed {} {mode_name} P={world}: {tp:.3}s speedup {s:.3}",
                            strategy.name()
                        );
                    }
                    Err(e) => {
                        let _ = writeln!(
                            csv,
                            "{},{mode_name},{world},{samples},,,error: {e}",
                            strategy.name()
                        );
                        println!("bench-fixed {} {mode_name} P={world}: failed ({e})", strategy.name());
                    }
                }
            }
        }
    }
    write_csv(&out.join("bench-fixed.csv"), &csv)
}

/// Proportional-sample scaling: S = samples_per_worker · P; efficiency
/// against the P = 1 point.
pub fn bench_proportional(cfg: &Config, out: &Path) -> Result<(), EngineError> {
    let per = cfg.bench.samples_per_worker.max(1);
    let runs = cfg.bench.runs.max(1);
    let mut csv = String::from(
        "# bpar-bench-proportional-v1\nworld_size,samples,median_epoch_seconds,efficiency,status\n",
    );

    let t1 = point_config(cfg, Strategy::Sequential, 1, per, BatchMode::FixedGlobal)
        .and_then(|tc| measure(cfg, &tc, runs))
        .map_err(|e| EngineError::config(format!("P=1 baseline failed: {e}")))?;
    let _ = writeln!(csv, "1,{per},{t1},1.0,ok");
    println!("bench-proportional P=1 S={per}: {t1:.3}s efficiency 1.000");

    for &world in cfg.bench.worker_counts.iter().filter(|&&w| w > 1) {
        let samples = per * world;
        match point_config(cfg, Strategy::SampleParallel, world, samples, BatchMode::FixedGlobal)
            .and_then(|tc| measure(cfg, &tc, runs))
        {
            Ok(tp) => {
                let e = efficiency(t1, tp).map_err(|e| EngineError::config(e.to_string()))?;
                let _ = writeln!(csv, "{world},{samples},{tp},{e},ok");
                println!("bench-proportional P={world} S={samples}: {tp:.3}s efficiency {e:.3}");
            }
            Err(e) => {
                let _ = writeln!(csv, "{world},{samples},,,error: {e}");
                println!("bench-proportional P={world} S={samples}: failed ({e})");
            }
        }
    }
    write_csv(&out.join("bench-proportional.csv"), &csv)
}
