//! Predictive, calibration and scaling metrics, wall-clock instrumentation
//! with barrier fencing, and CSV/manifest emission.
//!
//! MACE here is defined over Gaussian central intervals: for each nominal
//! level q the empirical coverage is the fraction of targets inside
//! mean ± z(q)·std with z(q) = Φ⁻¹((1+q)/2), and MACE is the mean absolute
//! gap |coverage − q| over 19 evenly spaced levels 0.05…0.95. The
//! classification variant bins predictions by confidence into equal-width
//! bins and averages |accuracy − confidence| over nonempty bins.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::collectives::{CollectiveError, ProcessGroup};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("speedup/efficiency inputs must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("probability rows must sum to 1 within 1e-9, row {row} sums to {sum}")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("metric needs at least one target")]
    EmptyTargets,
    #[error("calibration levels must lie strictly inside (0, 1)")]
    BadLevels,
    #[error("shape mismatch between predictions and targets")]
    Shape,
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One evaluation snapshot of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub cumulative_wall_seconds: f64,
    pub train_loss: f64,
    /// Accuracy for classification, MSE for regression.
    pub eval_metric: f64,
    pub nll: f64,
    pub mace: f64,
    pub strategy: String,
    pub world_size: usize,
    pub samples: usize,
    pub global_batch_size: usize,
}

/// Scaling ratio for a fixed workload: T1(n) / Tp(n).
pub fn speedup(t1: f64, tp: f64) -> Result<f64, MetricsError> {
    if t1 <= 0.0 || !t1.is_finite() {
        return Err(MetricsError::NonPositiveTime(t1));
    }
    if tp <= 0.0 || !tp.is_finite() {
        return Err(MetricsError::NonPositiveTime(tp));
    }
    Ok(t1 / tp)
}

/// Scaling ratio at constant per-worker workload: T1(n) / Tp(n·p).
pub fn efficiency(t1_at_n: f64, tp_at_np: f64) -> Result<f64, MetricsError> {
    speedup(t1_at_n, tp_at_np)
}

/// −(1/batch) Σ ln(mean_prob[true class]), probabilities floored at 1e-12.
pub fn classification_nll(mean_probs: &Tensor, labels: &[usize]) -> Result<f64, MetricsError> {
    let (rows, cols) = (mean_probs.rows(), mean_probs.cols());
    if rows == 0 {
        return Err(MetricsError::EmptyTargets);
    }
    if labels.len() != rows {
        return Err(MetricsError::Shape);
    }
    for r in 0..rows {
        let sum: f64 = mean_probs.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetricsError::RowNotNormalized { row: r, sum });
        }
    }
    let mut acc = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= cols {
            return Err(MetricsError::Shape);
        }
        acc -= mean_probs.row(r)[label].max(1e-12).ln();
    }
    Ok(acc / rows as f64)
}

/// The 19 default central-interval levels 0.05, 0.10, …, 0.95.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Mean absolute calibration error over Gaussian central intervals.
pub fn mace(
    mean: &[f64],
    std: &[f64],
    targets: &[f64],
    levels: &[f64],
) -> Result<f64, MetricsError> {
    if targets.is_empty() {
        return Err(MetricsError::EmptyTargets);
    }
    if mean.len() != targets.len() || std.len() != targets.len() {
        return Err(MetricsError::Shape);
    }
    if levels.is_empty() || levels.iter().any(|&q| q <= 0.0 || q >= 1.0) {
        return Err(MetricsError::BadLevels);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let n = targets.len() as f64;
    let mut total_gap = 0.0;
    for &q in levels {
        let z = normal.inverse_cdf(0.5 * (1.0 + q));
        let covered = targets
            .iter()
            .zip(mean.iter().zip(std))
            .filter(|(&t, (&m, &s))| (t - m).abs() <= z * s)
            .count() as f64;
        total_gap += (covered / n - q).abs();
    }
    Ok(total_gap / levels.len() as f64)
}

/// Classification calibration: equal-width confidence bins, mean
/// |accuracy − mean confidence| over nonempty bins.
pub fn mace_classification(
    mean_probs: &Tensor,
    labels: &[usize],
    bins: usize,
) -> Result<f64, MetricsError> {
    let rows = mean_probs.rows();
    if rows == 0 {
        return Err(MetricsError::EmptyTargets);
    }
    if labels.len() != rows || bins == 0 {
        return Err(MetricsError::Shape);
    }
    let mut bin_conf = vec![0.0; bins];
    let mut bin_hits = vec![0.0; bins];
    let mut bin_count = vec![0usize; bins];
    for (r, &label) in labels.iter().enumerate() {
        let row = mean_probs.row(r);
        let (argmax, conf) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            });
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        bin_conf[b] += conf;
        bin_hits[b] += f64::from(argmax == label);
        bin_count[b] += 1;
    }
    let mut gap = 0.0;
    let mut nonempty = 0;
    for b in 0..bins {
        if bin_count[b] > 0 {
            let c = bin_count[b] as f64;
            gap += (bin_hits[b] / c - bin_conf[b] / c).abs();
            nonempty += 1;
        }
    }
    Ok(gap / nonempty as f64)
}

// ── Wall-clock instrumentation ──────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    DataLoad,
    Forward,
    Backward,
    Allreduce,
    Optimizer,
    EpochTotal,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::DataLoad => "data_load",
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::Allreduce => "allreduce",
            Phase::Optimizer => "optimizer",
            Phase::EpochTotal => "epoch_total",
        }
    }

    pub const ALL: [Phase; 6] = [
        Phase::DataLoad,
        Phase::Forward,
        Phase::Backward,
        Phase::Allreduce,
        Phase::Optimizer,
        Phase::EpochTotal,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingSample {
    pub phase: Phase,
    pub seconds: f64,
}

/// Worker-local accumulator for per-phase wall time.
#[derive(Debug, Default, Clone)]
pub struct PhaseTimer {
    seconds: [f64; 6],
}

impl PhaseTimer {
    pub fn new() -> Self {
        PhaseTimer::default()
    }

    fn slot(phase: Phase) -> usize {
        Phase::ALL.iter().position(|p| *p == phase).unwrap()
    }

    pub fn add(&mut self, phase: Phase, seconds: f64) {
        self.seconds[Self::slot(phase)] += seconds;
    }

    /// Times a closure into the given phase.
    pub fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(phase, start.elapsed().as_secs_f64());
        out
    }

    pub fn get(&self, phase: Phase) -> f64 {
        self.seconds[Self::slot(phase)]
    }

    pub fn samples(&self) -> Vec<TimingSample> {
        Phase::ALL
            .iter()
            .map(|&phase| TimingSample {
                phase,
                seconds: self.get(phase),
            })
            .collect()
    }
}

/// Barrier-fenced epoch timing. All workers call collectively; the body
/// receives the group back for its own collectives and accumulates
/// per-phase times into the provided timer. Phase times are max-reduced
/// across workers (the slowest worker defines the epoch) via one broadcast
/// per rank, and `EpochTotal` is the fenced wall time.
pub fn timed_epoch<T, E, F>(
    group: &mut ProcessGroup,
    body: F,
) -> Result<(T, Vec<TimingSample>), E>
where
    F: FnOnce(&mut ProcessGroup, &mut PhaseTimer) -> Result<T, E>,
    E: From<CollectiveError>,
{
    let mut timer = PhaseTimer::new();
    group.barrier()?;
    let start = Instant::now();
    let out = body(group, &mut timer)?;
    group.barrier()?;
    timer.add(Phase::EpochTotal, start.elapsed().as_secs_f64());

    let world = group.world_size();
    let mut maxed = timer.seconds;
    if world > 1 {
        for root in 0..world {
            let shared = group.broadcast(&timer.seconds, root)?;
            for (m, v) in maxed.iter_mut().zip(&shared) {
                *m = m.max(*v);
            }
        }
    }
    let samples = Phase::ALL
        .iter()
        .enumerate()
        .map(|(i, &phase)| TimingSample {
            phase,
            seconds: maxed[i],
        })
        .collect();
    Ok((out, samples))
}

// ── Emission ────────────────────────────────────────────────────────

pub const METRICS_SCHEMA: &str = "bpar-metrics-v1";
pub const TIMINGS_SCHEMA: &str = "bpar-timings-v1";

const METRICS_HEADER: &str =
    "epoch,cumulative_wall_seconds,train_loss,eval_metric,nll,mace,strategy,world_size,samples,global_batch_size";

/// Writes one metrics CSV, one timings CSV and the manifest.
/// Returns the three file paths.
pub fn emit_results(
    records: &[MetricsRecord],
    timings: &[(usize, Vec<TimingSample>)],
    manifest: &str,
    dir: &Path,
) -> Result<[std::path::PathBuf; 3], MetricsError> {
    std::fs::create_dir_all(dir).map_err(|e| MetricsError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let metrics_path = dir.join("metrics.csv");
    let timings_path = dir.join("timings.csv");
    let manifest_path = dir.join("manifest.toml");

    let mut out = String::new();
    let _ = writeln!(out, "# {METRICS_SCHEMA}");
    let _ = writeln!(out, "{METRICS_HEADER}");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.cumulative_wall_seconds,
            r.train_loss,
            r.eval_metric,
            r.nll,
            r.mace,
            r.strategy,
            r.world_size,
            r.samples,
            r.global_batch_size
        );
    }
    write_file(&metrics_path, &out)?;

    let mut out = String::new();
    let _ = writeln!(out, "# {TIMINGS_SCHEMA}");
    let _ = writeln!(out, "epoch,phase,seconds");
    for (epoch, samples) in timings {
        for s in samples {
            let _ = writeln!(out, "{},{},{}", epoch, s.phase.name(), s.seconds);
        }
    }
    write_file(&timings_path, &out)?;

    write_file(&manifest_path, manifest)?;
    Ok([metrics_path, timings_path, manifest_path])
}

fn write_file(path: &Path, content: &str) -> Result<(), MetricsError> {
    let mut f = std::fs::File::create(path).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(content.as_bytes()).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Parses a metrics CSV back into records (round-trip check and external
/// tooling hook).
pub fn parse_metrics_csv(content: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut records = Vec::new();
    for line in content.lines().skip(2) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(MetricsError::Shape);
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| MetricsError::Shape);
        let parse_u = |s: &str| s.parse::<usize>().map_err(|_| MetricsError::Shape);
        records.push(MetricsRecord {
            epoch: parse_u(f[0])?,
            cumulative_wall_seconds: parse_f(f[1])?,
            train_loss: parse_f(f[2])?,
            eval_metric: parse_f(f[3])?,
            nll: parse_f(f[4])?,
            mace: parse_f(f[5])?,
            strategy: f[6].to_string(),
            world_size: parse_u(f[7])?,
            samples: parse_u(f[8])?,
            global_batch_size: parse_u(f[9])?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::time::Duration;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup(100.0, 25.0).unwrap(), 4.0);
        assert_eq!(speedup(50.0, 50.0).unwrap(), 1.0);
        assert!((speedup(100.0, 110.0).unwrap() - 0.9090909090909091).abs() < 1e-15);
        assert!(speedup(0.0, 1.0).is_err());
        assert!(speedup(1.0, -1.0).is_err());
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(efficiency(10.0, 10.0).unwrap(), 1.0);
        assert_eq!(efficiency(100.0, 125.0).unwrap(), 0.8);
    }

    #[test]
    #[allow(clippy::approx_constant)] // rounded worked values asserted on purpose
    fn nll_examples() {
        // perfectly confident and correct → floored log of 1 → 0
        let probs = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = classification_nll(&probs, &[0, 1]).unwrap();
        assert!(v.abs() < 1e-12);

        // uniform over 10 classes → ln 10
        let row = vec![0.1; 10];
        let probs = Tensor::matrix(&[&row]);
        let v = classification_nll(&probs, &[3]).unwrap();
        assert!((v - 10.0_f64.ln()).abs() < 1e-12);
        assert!((v - 2.3026).abs() < 1e-4);

        // zero probability on the true class stays finite via the floor
        let probs = Tensor::matrix(&[&[0.0, 1.0]]);
        let v = classification_nll(&probs, &[0]).unwrap();
        assert!((v - (-(1e-12_f64.ln()))).abs() < 1e-9);
        assert!(v.is_finite());

        // a non-normalized row is a contract violation
        let probs = Tensor::matrix(&[&[0.5, 0.4]]);
        assert!(matches!(
            classification_nll(&probs, &[0]),
            Err(MetricsError::RowNotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn mace_self_consistency() {
        // targets drawn exactly from the predictive Gaussians → MACE ≈ 0
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
        let v = mace(&mean, &std, &targets, &default_levels()).unwrap();
        assert!(v < 0.01, "self-consistency MACE {v}");
    }

    #[test]
    fn mace_degenerate_std_is_half() {
        // std ≡ 0 and all targets off the mean: coverage 0 at every level,
        // so MACE = mean(levels) = 0.5 over the default levels
        let mean = vec![0.0; 10];
        let std = vec![0.0; 10];
        let targets = vec![1.0; 10];
        let v = mace(&mean, &std, &targets, &default_levels()).unwrap();
        let expected = default_levels().iter().sum::<f64>() / 19.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mace_hand_enumeration() {
        // 4 points at level 0.5: exactly 2 inside → |0.5 − 0.5| = 0
        let normal = Normal::new(0.0, 1.0).unwrap();
        let z = normal.inverse_cdf(0.75);
        let mean = vec![0.0; 4];
        let std = vec![1.0; 4];
        // two inside (|t| < z), two outside
        let targets = vec![0.0, z * 0.5, z * 2.0, z * 3.0];
        let v = mace(&mean, &std, &targets, &[0.5]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn mace_rescale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 500;
        let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let std: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let base = mace(&mean, &std, &targets, &default_levels()).unwrap();
        for factor in [0.1, 3.0, 1e6] {
            let m2: Vec<f64> = mean.iter().map(|v| v * factor).collect();
            let s2: Vec<f64> = std.iter().map(|v| v * factor).collect();
            let t2: Vec<f64> = targets.iter().map(|v| v * factor).collect();
            let v = mace(&m2, &s2, &t2, &default_levels()).unwrap();
            assert!((v - base).abs() < 1e-12, "factor {factor}: {v} vs {base}");
        }
    }

    #[test]
    fn jensen_gap_between_nll_routes() {
        // NLL of the mean probability ≤ mean of per-sample NLLs
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let s = rng.gen_range(2..6);
            let classes = 3;
            let mut probs: Vec<Vec<f64>> = Vec::new();
            for _ in 0..s {
                let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                probs.push(raw.iter().map(|v| v / sum).collect());
            }
            let label = rng.gen_range(0..classes);
            let mean_prob: Vec<f64> = (0..classes)
                .map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / s as f64)
                .collect();
            let nll_of_mean = -mean_prob[label].ln();
            let mean_nll =
                probs.iter().map(|p| -p[label].ln()).sum::<f64>() / s as f64;
            assert!(
                nll_of_mean <= mean_nll + 1e-12,
                "{nll_of_mean} vs {mean_nll}"
            );
        }
    }

    #[test]
    fn phase_timer_accumulates() {
        let mut t = PhaseTimer::new();
        t.add(Phase::Forward, 0.5);
        t.add(Phase::Forward, 0.25);
        assert_eq!(t.get(Phase::Forward), 0.75);
        let out = t.time(Phase::Optimizer, || 42);
        assert_eq!(out, 42);
        assert!(t.get(Phase::Optimizer) >= 0.0);
    }

    #[test]
    fn timed_epoch_solo_bounds_phases() {
        let mut group = ProcessGroup::solo();
        let ((), samples) = timed_epoch::<_, crate::error::EngineError, _>(&mut group, |_group, timer| {
            timer.time(Phase::Forward, || std::thread::sleep(Duration::from_millis(30)));
            timer.time(Phase::Backward, || std::thread::sleep(Duration::from_millis(20)));
            Ok(())
        })
        .unwrap();
        let total = samples
            .iter()
            .find(|s| s.phase == Phase::EpochTotal)
            .unwrap()
            .seconds;
        let tracked: f64 = samples
            .iter()
            .filter(|s| s.phase != Phase::EpochTotal)
            .map(|s| s.seconds)
            .sum();
        assert!(tracked <= total * 1.05 + 0.001, "{tracked} vs {total}");
        assert!(total >= 0.05);
    }

    #[test]
    fn timed_epoch_detects_injected_delay() {
        let mut group = ProcessGroup::solo();
        let ((), samples) = timed_epoch::<_, crate::error::EngineError, _>(&mut group, |_group, timer| {
            timer.time(Phase::Forward, || std::thread::sleep(Duration::from_millis(100)));
            Ok(())
        })
        .unwrap();
        let fwd = samples
            .iter()
            .find(|s| s.phase == Phase::Forward)
            .unwrap()
            .seconds;
        assert!(fwd >= 0.1, "forward phase recorded {fwd}");
    }

    #[test]
    fn timed_epoch_max_reduces_across_workers() {
        let results = crate::collectives::run_inproc_workers(
            2,
            crate::collectives::DEFAULT_TIMEOUT,
            |rank, group| {
                let ((), samples) = timed_epoch::<_, crate::error::EngineError, _>(group, |_group, timer| {
                    let ms = if rank == 0 { 10 } else { 80 };
                    timer.time(Phase::Forward, || {
                        std::thread::sleep(Duration::from_millis(ms))
                    });
                    Ok(())
                })?;
                Ok(samples)
            },
        );
        for r in results {
            let samples = r.unwrap();
            let fwd = samples
                .iter()
                .find(|s| s.phase == Phase::Forward)
                .unwrap()
                .seconds;
            assert!(fwd >= 0.08, "slowest worker defines the phase, got {fwd}");
        }
    }

    #[test]
    fn emit_and_parse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![MetricsRecord {
            epoch: 1,
            cumulative_wall_seconds: 1.5,
            train_loss: 0.25,
            eval_metric: 0.125,
            nll: 0.9,
            mace: 0.04,
            strategy: "sample_parallel".into(),
            world_size: 4,
            samples: 8,
            global_batch_size: 64,
        }];
        let timings = vec![(
            1usize,
            vec![TimingSample {
                phase: Phase::Forward,
                seconds: 0.5,
            }],
        )];
        let paths = emit_results(&records, &timings, "[train]\nsamples = 8\n", dir.path()).unwrap();
        let content = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(content.starts_with(&format!("# {METRICS_SCHEMA}")));
        let parsed = parse_metrics_csv(&content).unwrap();
        assert_eq!(parsed, records);

        // empty records still emit the schema + header lines
        let paths = emit_results(&[], &[], "", dir.path()).unwrap();
        let content = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(content.lines().count(), 2);
        assert!(parse_metrics_csv(&content).unwrap().is_empty());
    }
}
