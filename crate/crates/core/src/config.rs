//! Typed key-value run configuration: one TOML section per module,
//! dotted-path overrides, and manifest emission.
//!
//! The manifest written next to every metrics output embeds the full
//! configuration (re-parseable to an equal config), the seed-recipe
//! constants and the engine version. Override paths must reference
//! existing keys, so sweep scripts fail loudly on typos; unknown keys in
//! files are tolerated, which is what lets a manifest parse back as a
//! config.

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_pattern_grid, generate_synthetic_series, load_csv_series, split_dataset, window,
    Augmentation, Normalization, SplitDataset, WindowSpec, GRID_SIDE,
};
use crate::error::EngineError;
use crate::losses::{AggregationMode, LossKind, LossSpec, PerSampleKind};
use crate::optim::OptimizerConfig;
use crate::seed::SeedRecipe;
use crate::trainers::{AugmentationMode, BatchMode, Strategy, TaskKind, TrainConfig};
use crate::variational::{Activation, Architecture, BayesianModel, WeightMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct Config {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationSection,
    pub collectives: CollectivesSection,
    pub bench: BenchSection,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// "variational" (Bayes-by-Backprop) or "mc_dropout".
    pub kind: String,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Constant c in σ_init = c / fan_in.
    pub sigma_scale: f64,
    /// Dropout probability for mc_dropout models.
    pub dropout_p: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: "variational".into(),
            hidden: vec![128, 128],
            activation: Activation::Relu,
            sigma_scale: 1.0,
            dropout_p: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// "synthetic" sinusoid series, "csv" ingestion, or the
    /// "pattern_grid" 8×8 classification task.
    pub source: String,
    pub length: usize,
    /// (amplitude, period, phase) triples.
    pub components: Vec<[f64; 3]>,
    pub noise_std: f64,
    pub seed: u64,
    pub csv_path: String,
    pub csv_column: String,
    pub csv_delimiter: String,
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub normalize: bool,
    pub grid_train: usize,
    pub grid_val: usize,
    pub grid_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            length: 4000,
            components: vec![[1.0, 96.0, 0.0], [0.4, 24.0, 1.0]],
            noise_std: 0.05,
            seed: 1,
            csv_path: String::new(),
            csv_column: "load".into(),
            csv_delimiter: ",".into(),
            history: 96,
            horizon: 24,
            stride: 1,
            val_fraction: 0.1,
            normalize: true,
            grid_train: 96,
            grid_val: 512,
            grid_noise: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub strategy: Strategy,
    pub world_size: usize,
    pub samples: usize,
    pub sample_groups: usize,
    pub data_groups: usize,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub epochs: usize,
    pub base_seed: u64,
    pub kl_weight: f64,
    pub eval_samples: usize,
    pub eval_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            strategy: Strategy::Sequential,
            world_size: 1,
            samples: 4,
            sample_groups: 1,
            data_groups: 1,
            batch_size: 32,
            batch_mode: BatchMode::FixedGlobal,
            epochs: 3,
            base_seed: 42,
            kl_weight: 1.0,
            eval_samples: 8,
            eval_interval: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    /// mse_of_mean | cross_entropy_of_mean_prob | gaussian_nll |
    /// mean_of_per_sample_loss
    pub kind: String,
    /// Inner loss for mean_of_per_sample_loss: mse | cross_entropy.
    pub per_sample: PerSampleKind,
    pub aggregation: AggregationMode,
    pub variance_floor: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            kind: "mse_of_mean".into(),
            per_sample: PerSampleKind::Mse,
            aggregation: AggregationMode::Approximate,
            variance_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSection {
    /// none | additive_jitter | periodic_shift | horizontal_flip |
    /// random_crop
    pub kind: String,
    pub mode: AugmentationMode,
    pub scale: f64,
    pub max_shift: usize,
    pub flip_prob: f64,
    pub pad: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        AugmentationSection {
            kind: "none".into(),
            mode: AugmentationMode::Shared,
            scale: 0.1,
            max_shift: 4,
            flip_prob: 0.5,
            pad: 1,
            image_height: GRID_SIDE,
            image_width: GRID_SIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectivesSection {
    pub timeout_secs: u64,
}

impl Default for CollectivesSection {
    fn default() -> Self {
        CollectivesSection { timeout_secs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub worker_counts: Vec<usize>,
    pub samples_per_worker: usize,
    pub epochs_per_point: usize,
    pub runs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            worker_counts: vec![1, 2, 4],
            samples_per_worker: 2,
            epochs_per_point: 1,
            runs: 3,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, EngineError> {
        toml::from_str(text).map_err(|e| EngineError::config(format!("config parse: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Config, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?;
        Config::parse(&text)
    }

    /// Applies dotted-path overrides onto the parsed document. Every path
    /// must name an existing key.
    pub fn with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Config, EngineError> {
        let mut doc: toml::Value = toml::from_str(text)
            .map_err(|e| EngineError::config(format!("config parse: {e}")))?;
        // merge defaults so overrides can target keys the file omitted
        let defaults: toml::Value = toml::Value::try_from(Config::parse(text)?)
            .map_err(|e| EngineError::config(e.to_string()))?;
        merge_missing(&mut doc, &defaults);
        for (path, raw_value) in overrides {
            apply_override(&mut doc, path, raw_value)?;
        }
        doc.try_into()
            .map_err(|e| EngineError::config(format!("override produced invalid config: {e}")))
    }

    /// Serializes the full configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Run manifest: the full configuration plus seed-recipe constants and
    /// the engine version. Parses back to an equal `Config`.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        out.push_str("# bpar run manifest v1\n");
        out.push_str(&self.to_toml());
        out.push_str("\n[engine]\n");
        out.push_str(&format!("version = {:?}\n", env!("CARGO_PKG_VERSION")));
        out.push_str("seed_hash = \"splitmix64\"\n");
        out.push_str(
            "seed_tags = { init = 1, shuffle = 2, sample = 3, augment = 4, eval_sample = 5, data = 6 }\n",
        );
        out
    }

    pub fn task(&self) -> Result<TaskKind, EngineError> {
        match self.data.source.as_str() {
            "pattern_grid" => Ok(TaskKind::Classification),
            "synthetic" | "csv" => Ok(TaskKind::Regression),
            other => Err(EngineError::config(format!(
                "unknown data source {other:?} (expected synthetic, csv or pattern_grid)"
            ))),
        }
    }

    pub fn loss_kind(&self) -> Result<LossKind, EngineError> {
        match self.loss.kind.as_str() {
            "mse_of_mean" => Ok(LossKind::MseOfMean),
            "cross_entropy_of_mean_prob" => Ok(LossKind::CrossEntropyOfMeanProb),
            "gaussian_nll" => Ok(LossKind::GaussianNll),
            "mean_of_per_sample_loss" => Ok(LossKind::MeanOfPerSample(self.loss.per_sample)),
            other => Err(EngineError::config(format!(
                "unknown loss kind {other:?}"
            ))),
        }
    }

    pub fn augmentation(&self) -> Result<Augmentation, EngineError> {
        let a = &self.augmentation;
        match a.kind.as_str() {
            "none" => Ok(Augmentation::None),
            "additive_jitter" => Ok(Augmentation::AdditiveJitter { scale: a.scale }),
            "periodic_shift" => Ok(Augmentation::PeriodicShift {
                max_shift: a.max_shift,
            }),
            "horizontal_flip" => Ok(Augmentation::HorizontalFlip {
                prob: a.flip_prob,
                height: a.image_height,
                width: a.image_width,
            }),
            "random_crop" => Ok(Augmentation::RandomCrop {
                pad: a.pad,
                height: a.image_height,
                width: a.image_width,
            }),
            other => Err(EngineError::config(format!(
                "unknown augmentation kind {other:?}"
            ))),
        }
    }

    /// Builds the dataset described by [data], normalized on the training
    /// split when requested.
    pub fn build_dataset(&self) -> Result<SplitDataset, EngineError> {
        let d = &self.data;
        match d.source.as_str() {
            "pattern_grid" => {
                let train = generate_pattern_grid(d.grid_train, d.grid_noise, d.seed);
                let val = generate_pattern_grid(d.grid_val, d.grid_noise, d.seed.wrapping_add(1));
                Ok(SplitDataset { train, val })
            }
            "synthetic" | "csv" => {
                let series = if d.source == "synthetic" {
                    let components: Vec<(f64, f64, f64)> =
                        d.components.iter().map(|c| (c[0], c[1], c[2])).collect();
                    generate_synthetic_series(d.length, &components, d.noise_std, d.seed)
                } else {
                    if d.csv_path.is_empty() {
                        return Err(EngineError::config("csv source requires data.csv_path"));
                    }
                    let delim = d.csv_delimiter.as_bytes().first().copied().unwrap_or(b',');
                    let (series, _fills) =
                        load_csv_series(std::path::Path::new(&d.csv_path), &d.csv_column, delim)?;
                    series
                };
                let spec = WindowSpec {
                    history: d.history,
                    horizon: d.horizon,
                    stride: d.stride,
                };
                let ds = window(&series, &spec)?;
                let mut split = split_dataset(&ds, d.val_fraction)?;
                if d.normalize {
                    let norm = Normalization::fit(&split.train);
                    norm.apply(&mut split.train);
                    norm.apply(&mut split.val);
                }
                Ok(split)
            }
            other => Err(EngineError::config(format!(
                "unknown data source {other:?}"
            ))),
        }
    }

    /// Architecture implied by [model] and the dataset dimensions.
    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> Result<Architecture, EngineError> {
        let (weight_mode, dropout_p) = match self.model.kind.as_str() {
            "variational" => (WeightMode::Variational, None),
            "mc_dropout" => (WeightMode::MeanOnly, Some(self.model.dropout_p)),
            other => {
                return Err(EngineError::config(format!(
                    "unknown model kind {other:?} (expected variational or mc_dropout)"
                )))
            }
        };
        Ok(Architecture {
            input_dim,
            hidden: self.model.hidden.clone(),
            output_dim,
            activation: self.model.activation,
            weight_mode,
            dropout_p,
            sigma_scale: self.model.sigma_scale,
        })
    }

    pub fn build_model(&self, data: &SplitDataset) -> Result<BayesianModel, EngineError> {
        let arch = self.architecture(data.train.input_dim(), data.train.target_dim())?;
        Ok(BayesianModel::build(
            &arch,
            &SeedRecipe::new(self.train.base_seed),
        ))
    }

    /// Runtime training configuration; |D| is the training-split size.
    pub fn train_config(&self, dataset_size: usize) -> Result<TrainConfig, EngineError> {
        let t = &self.train;
        let kl_weight = match self.model.kind.as_str() {
            // point-weight models have no prior matching term
            "mc_dropout" => 0.0,
            _ => t.kl_weight,
        };
        let cfg = TrainConfig {
            strategy: t.strategy,
            world_size: t.world_size,
            samples: t.samples,
            sample_groups: t.sample_groups,
            data_groups: t.data_groups,
            batch_size: t.batch_size,
            batch_mode: t.batch_mode,
            epochs: t.epochs,
            base_seed: t.base_seed,
            loss: LossSpec {
                kind: self.loss_kind()?,
                aggregation: self.loss.aggregation,
                dataset_size: dataset_size.max(1),
                variance_floor: self.loss.variance_floor,
            },
            optimizer: self.optimizer.clone(),
            augmentation: self.augmentation()?,
            augmentation_mode: self.augmentation.mode,
            kl_weight,
            task: self.task()?,
            eval_samples: t.eval_samples,
            eval_interval: t.eval_interval,
            record_seeds: false,
            record_grads: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge_missing(doc: &mut toml::Value, defaults: &toml::Value) {
    if let (toml::Value::Table(doc), toml::Value::Table(defaults)) = (doc, defaults) {
        for (k, v) in defaults {
            match doc.get_mut(k) {
                None => {
                    doc.insert(k.clone(), v.clone());
                }
                Some(existing) => merge_missing(existing, v),
            }
        }
    }
}

fn apply_override(doc: &mut toml::Value, path: &str, raw: &str) -> Result<(), EngineError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(EngineError::config(format!("bad override path {path:?}")));
    }
    let mut cursor = doc;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .get_mut(*part)
            .ok_or_else(|| EngineError::config(format!("override path {path:?} not found")))?;
    }
    let last = parts[parts.len() - 1];
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| EngineError::config(format!("override path {path:?} not found")))?;
    if !table.contains_key(last) {
        return Err(EngineError::config(format!(
            "override path {path:?} does not reference an existing config key"
        )));
    }
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    table.insert(last.to_string(), parsed);
    Ok(())
}
