//! Training-run orchestration: in-process runs, the socket-worker launcher,
//! and result emission.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use bpar_core::checkpoint::save_model;
use bpar_core::collectives::socket;
use bpar_core::config::Config;
use bpar_core::metrics::emit_results;
use bpar_core::trainers::{train, train_worker, TrainOutput};
use bpar_core::EngineError;

pub fn train_command(
    cfg: &Config,
    out: &Path,
    transport: &str,
    port: u16,
) -> Result<(), EngineError> {
    let data = cfg.build_dataset()?;
    let train_cfg = cfg.train_config(data.train.len())?;
    match transport {
        "inproc" => {
            let model = cfg.build_model(&data)?;
            let output = train(&model, &data, &train_cfg)?;
            emit(cfg, &output, out)?;
            summarize(&output);
            Ok(())
        }
        "socket" => {
            if train_cfg.world_size == 1 {
                // no transport needed; run inline
                return train_command(cfg, out, "inproc", port);
            }
            launch_socket_workers(cfg, train_cfg.world_size, port, out)
        }
        other => Err(EngineError::config(format!(
            "unknown transport {other:?} (expected inproc or socket)"
        ))),
    }
}

/// Spawns one OS process per rank, each rejoining through the loopback
/// rendezvous, and propagates the first failure.
pub fn launch_socket_workers(
    cfg: &Config,
    world: usize,
    port: u16,
    out: &Path,
) -> Result<(), EngineError> {
    std::fs::create_dir_all(out).map_err(|e| EngineError::io(out.display().to_string(), e))?;
    let config_path = out.join("worker-config.toml");
    std::fs::write(&config_path, cfg.to_toml())
        .map_err(|e| EngineError::io(config_path.display().to_string(), e))?;
    let exe = std::env::current_exe()
        .map_err(|e| EngineError::io("current_exe", e))?;

    let mut children: Vec<Child> = Vec::new();
    for rank in 0..world {
        let child = Command::new(&exe)
            .arg("worker")
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--world")
            .arg(world.to_string())
            .arg("--port")
            .arg(port.to_string())
            .arg("--config")
            .arg(&config_path)
            .arg("--out")
            .arg(out)
            .stdout(Stdio::inherit())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EngineError::io(format!("spawn worker {rank}"), e))?;
        children.push(child);
    }
    let mut first_failure: Option<(usize, i32)> = None;
    for (rank, child) in children.iter_mut().enumerate() {
        let status = child
            .wait()
            .map_err(|e| EngineError::io(format!("wait worker {rank}"), e))?;
        if !status.success() && first_failure.is_none() {
            first_failure = Some((rank, status.code().unwrap_or(-1)));
        }
    }
    match first_failure {
        None => Ok(()),
        Some((rank, code)) => Err(EngineError::WorkerFailed { rank, code }),
    }
}

/// Entry point of a spawned socket worker.
pub fn worker_command(
    cfg: &Config,
    rank: usize,
    world: usize,
    port: u16,
    out: &Path,
) -> Result<(), EngineError> {
    let data = cfg.build_dataset()?;
    let train_cfg = cfg.train_config(data.train.len())?;
    if train_cfg.world_size != world {
        return Err(EngineError::config(format!(
            "worker launched with world {world} but config says {}",
            train_cfg.world_size
        )));
    }
    let timeout = Duration::from_secs(cfg.collectives.timeout_secs);
    let model = cfg.build_model(&data)?;
    let mut group = socket::connect(rank, world, port, timeout)?;
    let output = train_worker(&model, &data, &train_cfg, &mut group)?;
    if rank == 0 {
        emit(cfg, &output, out)?;
        summarize(&output);
    }
    Ok(())
}

pub fn emit(cfg: &Config, output: &TrainOutput, out: &Path) -> Result<PathBuf, EngineError> {
    let manifest = cfg.manifest();
    emit_results(&output.records, &output.timings, &manifest, out)
        .map_err(|e| EngineError::config(e.to_string()))?;
    let ckpt = out.join("model.ckpt");
    save_model(&output.model, &ckpt).map_err(|e| EngineError::config(e.to_string()))?;
    Ok(ckpt)
}

fn summarize(output: &TrainOutput) {
    if let Some(last) = output.records.last() {
        println!(
            "epoch {}: train_loss {:.6} eval {:.6} nll {:.6} mace {:.4} ({:.2}s)",
            last.epoch,
            last.train_loss,
            last.eval_metric,
            last.nll,
            last.mace,
            last.cumulative_wall_seconds
        );
    } else {
        println!("run complete ({} epochs, no evaluation records)", output.timings.len());
    }
}
