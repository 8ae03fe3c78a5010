//! Flat binary model checkpoints.
//!
//! Layout (all integers little-endian, all floats IEEE 754 f64 LE):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BPCK"
//! 4       1     version (1)
//! 5       1     weight mode: 0 = variational, 1 = mean_only
//! 6       4     layer count u32
//! per layer:
//!         4     in_dim u32
//!         4     out_dim u32
//!         1     activation: 0 = identity, 1 = relu, 2 = tanh
//!         1     dropout: 0 = none, 1 = stochastic, 2 = deterministic
//!         8     dropout probability f64 (0.0 when dropout = 0)
//!         8·in·out   weight μ, row-major
//!         8·in·out   weight ρ, row-major
//!         8·out      bias μ
//!         8·out      bias ρ
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::dropout::{DropoutLayer, DropoutMode};
use crate::tensor::Tensor;
use crate::variational::{
    Activation, BayesianModel, VariationalLinear, VariationalParameter, WeightMode,
};

pub const MAGIC: [u8; 4] = *b"BPCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("invalid field {field}: {value}")]
    BadField { field: &'static str, value: u64 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode_model(model: &BayesianModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(match model.weight_mode {
        WeightMode::Variational => 0,
        WeightMode::MeanOnly => 1,
    });
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for (l, layer) in model.layers.iter().enumerate() {
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.push(match model.activations[l] {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        });
        match &model.dropouts[l] {
            None => {
                out.push(0);
                out.extend_from_slice(&0.0f64.to_le_bytes());
            }
            Some(d) => {
                out.push(match d.mode {
                    DropoutMode::Stochastic => 1,
                    DropoutMode::Deterministic => 2,
                });
                out.extend_from_slice(&d.drop_probability.to_le_bytes());
            }
        }
        for t in [
            &layer.weight.mu,
            &layer.weight.rho,
            &layer.bias.mu,
            &layer.bias.rho,
        ] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<BayesianModel, CheckpointError> {
    let mut r = Cursor { bytes, at: 0 };
    let magic = r.take::<4>("magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.take::<1>("version")?[0];
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let weight_mode = match r.take::<1>("weight mode")?[0] {
        0 => WeightMode::Variational,
        1 => WeightMode::MeanOnly,
        v => {
            return Err(CheckpointError::BadField {
                field: "weight_mode",
                value: v as u64,
            })
        }
    };
    let layer_count = u32::from_le_bytes(r.take::<4>("layer count")?) as usize;
    let mut layers = Vec::with_capacity(layer_count);
    let mut activations = Vec::with_capacity(layer_count);
    let mut dropouts = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let in_dim = u32::from_le_bytes(r.take::<4>("in_dim")?) as usize;
        let out_dim = u32::from_le_bytes(r.take::<4>("out_dim")?) as usize;
        if in_dim == 0 || out_dim == 0 {
            return Err(CheckpointError::BadField {
                field: "layer dims",
                value: (in_dim.max(out_dim)) as u64,
            });
        }
        let activation = match r.take::<1>("activation")?[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            v => {
                return Err(CheckpointError::BadField {
                    field: "activation",
                    value: v as u64,
                })
            }
        };
        let dropout_kind = r.take::<1>("dropout kind")?[0];
        let dropout_p = f64::from_le_bytes(r.take::<8>("dropout probability")?);
        let dropout = match dropout_kind {
            0 => None,
            1 => Some(DropoutLayer::stochastic(dropout_p).map_err(|_| {
                CheckpointError::BadField {
                    field: "dropout probability",
                    value: dropout_p.to_bits(),
                }
            })?),
            2 => Some(DropoutLayer::deterministic(dropout_p).map_err(|_| {
                CheckpointError::BadField {
                    field: "dropout probability",
                    value: dropout_p.to_bits(),
                }
            })?),
            v => {
                return Err(CheckpointError::BadField {
                    field: "dropout kind",
                    value: v as u64,
                })
            }
        };
        let mut read_tensor = |shape: Vec<usize>| -> Result<Tensor, CheckpointError> {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take::<8>("parameter data")?));
            }
            Ok(Tensor::new(shape, data).expect("sized above"))
        };
        let weight = VariationalParameter {
            mu: read_tensor(vec![in_dim, out_dim])?,
            rho: read_tensor(vec![in_dim, out_dim])?,
        };
        let bias = VariationalParameter {
            mu: read_tensor(vec![out_dim])?,
            rho: read_tensor(vec![out_dim])?,
        };
        layers.push(VariationalLinear { weight, bias });
        activations.push(activation);
        dropouts.push(dropout);
    }
    Ok(BayesianModel {
        layers,
        activations,
        dropouts,
        weight_mode,
    })
}

pub fn save_model(model: &BayesianModel, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_model(model);
    let mut f = std::fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<BayesianModel, CheckpointError> {
    let mut f = std::fs::File::open(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode_model(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        if self.at + N > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let out: [u8; N] = self.bytes[self.at..self.at + N].try_into().unwrap();
        self.at += N;
        Ok(out)
    }
}
