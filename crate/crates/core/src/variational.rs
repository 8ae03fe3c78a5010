//! Mean-field Gaussian variational layers and the Bayesian MLP container.
//!
//! Each weight is a pair (μ, ρ) with σ = softplus(ρ), so σ stays positive
//! for every finite ρ without clamping. Sampling uses the reparameterization
//! w = μ + σ ⊙ ε, recorded on the tape so gradients reach both μ and ρ.
//! The prior is fixed to N(0, I), which gives the closed-form prior
//! matching term ½ Σ (σ² + μ² − 1 − ln σ²).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dropout::DropoutLayer;
use crate::tape::{softplus, softplus_inv, Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Paired (μ, ρ) arrays for one weight tensor; σ = softplus(ρ).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParameter {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl VariationalParameter {
    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn numel(&self) -> usize {
        self.mu.numel()
    }

    /// σ values materialized from ρ.
    pub fn sigma(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| softplus(r)).collect()
    }
}

/// Initialization: μ ~ Kaiming normal (std = sqrt(2/fan_in)),
/// σ constant at `sigma_scale / fan_in`.
pub fn init_variational(
    shape: &[usize],
    fan_in: usize,
    sigma_scale: f64,
    rng: &mut ChaCha8Rng,
) -> VariationalParameter {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let numel: usize = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let mu: Vec<f64> = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    let sigma_init = sigma_scale / fan_in as f64;
    let rho = vec![softplus_inv(sigma_init); numel];
    VariationalParameter {
        mu: Tensor::new(shape.to_vec(), mu).expect("shape/data agree"),
        rho: Tensor::new(shape.to_vec(), rho).expect("shape/data agree"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

/// Whether forward passes draw weights or use the means directly.
/// `MeanOnly` is the Monte Carlo dropout regime: point weights, stochastic
/// masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Variational,
    MeanOnly,
}

/// One linear layer with variational weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLinear {
    pub weight: VariationalParameter,
    pub bias: VariationalParameter,
}

impl VariationalLinear {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of variational linear layers with per-layer activation and an
/// optional dropout layer after the activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianModel {
    pub layers: Vec<VariationalLinear>,
    pub activations: Vec<Activation>,
    pub dropouts: Vec<Option<DropoutLayer>>,
    pub weight_mode: WeightMode,
}

/// Architecture descriptor used to build models and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub weight_mode: WeightMode,
    /// Dropout probability applied after hidden activations; None disables
    /// dropout layers entirely.
    pub dropout_p: Option<f64>,
    /// Constant in σ_init = sigma_scale / fan_in.
    pub sigma_scale: f64,
}

impl BayesianModel {
    /// Builds and initializes a model. Bias fan_in is the layer input
    /// width, matching the weight initialization scale.
    pub fn build(arch: &Architecture, recipe: &crate::seed::SeedRecipe) -> Self {
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.hidden);
        dims.push(arch.output_dim);

        let mut layers = Vec::new();
        let mut activations = Vec::new();
        let mut dropouts = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut rng_w = recipe.init_stream(2 * l as u64);
            let mut rng_b = recipe.init_stream(2 * l as u64 + 1);
            let weight =
                init_variational(&[fan_in, fan_out], fan_in, arch.sigma_scale, &mut rng_w);
            let bias = init_variational(&[fan_out], fan_in, arch.sigma_scale, &mut rng_b);
            layers.push(VariationalLinear { weight, bias });
            let last = l == dims.len() - 2;
            activations.push(if last { Activation::Identity } else { arch.activation });
            // dropout after hidden activations only, never on the output
            dropouts.push(match arch.dropout_p {
                Some(p) if !last => Some(DropoutLayer::stochastic(p).expect("validated p")),
                _ => None,
            });
        }
        BayesianModel {
            layers,
            activations,
            dropouts,
            weight_mode: arch.weight_mode,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Total scalar parameter count: every weight and bias has a μ and a ρ.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * (l.weight.numel() + l.bias.numel()))
            .sum()
    }

    /// Flattens all parameters in layer order: per layer
    /// [w.mu, w.rho, b.mu, b.rho], each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.mu.data());
            out.extend_from_slice(l.weight.rho.data());
            out.extend_from_slice(l.bias.mu.data());
            out.extend_from_slice(l.bias.rho.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat length mismatch");
        let mut at = 0;
        for l in &mut self.layers {
            for tensor in [
                &mut l.weight.mu,
                &mut l.weight.rho,
                &mut l.bias.mu,
                &mut l.bias.rho,
            ] {
                let n = tensor.numel();
                tensor.data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
    }
}

/// Per-batch staging of model parameters as tape leaves.
///
/// All weight samples of the batch share the staged leaves, so gradient
/// contributions from every sample accumulate on them.
pub struct StagedModel {
    pub mu_w: Vec<Var>,
    pub rho_w: Vec<Var>,
    pub mu_b: Vec<Var>,
    pub rho_b: Vec<Var>,
    pub activations: Vec<Activation>,
    pub dropouts: Vec<Option<DropoutLayer>>,
    pub weight_mode: WeightMode,
}

impl StagedModel {
    pub fn stage(model: &BayesianModel, tape: &mut Tape) -> Self {
        let mut staged = StagedModel {
            mu_w: Vec::new(),
            rho_w: Vec::new(),
            mu_b: Vec::new(),
            rho_b: Vec::new(),
            activations: model.activations.clone(),
            dropouts: model.dropouts.clone(),
            weight_mode: model.weight_mode,
        };
        for l in &model.layers {
            staged.mu_w.push(tape.leaf(l.weight.mu.clone()));
            staged.rho_w.push(tape.leaf(l.weight.rho.clone()));
            staged.mu_b.push(tape.leaf(l.bias.mu.clone()));
            staged.rho_b.push(tape.leaf(l.bias.rho.clone()));
        }
        staged
    }

    pub fn layer_count(&self) -> usize {
        self.mu_w.len()
    }

    /// Accumulates the tape gradients of every staged leaf into a flat
    /// vector laid out like [`BayesianModel::to_flat`].
    pub fn accumulate_grads(&self, tape: &Tape, out: &mut [f64]) {
        let mut at = 0;
        for l in 0..self.layer_count() {
            for var in [self.mu_w[l], self.rho_w[l], self.mu_b[l], self.rho_b[l]] {
                let g = tape.grad(var);
                out[at..at + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, gv)| *o += gv);
                at += g.len();
            }
        }
        assert_eq!(at, out.len(), "gradient layout mismatch");
    }
}

/// Noise source for one stochastic forward pass. Zero-noise streams give
/// the deterministic ε = 0 pass used by equivalence tests.
pub enum NoiseStream<'a> {
    Rng(&'a mut ChaCha8Rng),
    Zero,
}

impl NoiseStream<'_> {
    fn normal(&mut self, n: usize) -> Vec<f64> {
        match self {
            NoiseStream::Rng(rng) => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            NoiseStream::Zero => vec![0.0; n],
        }
    }

    fn uniform(&mut self, n: usize) -> Vec<f64> {
        match self {
            NoiseStream::Rng(rng) => (0..n).map(|_| rng.gen::<f64>()).collect(),
            NoiseStream::Zero => vec![1.0; n],
        }
    }
}

/// Draws w = μ + softplus(ρ) ⊙ ε on the tape. ∂w/∂μ = 1 and
/// ∂w/∂ρ = ε · logistic(ρ) both flow through recorded ops.
pub fn sample_weights(
    tape: &mut Tape,
    mu: Var,
    rho: Var,
    noise: &mut NoiseStream,
) -> Result<Var, TensorError> {
    let shape = tape.value(mu).shape().to_vec();
    let n = tape.value(mu).numel();
    let eps = tape.leaf(Tensor::new(shape, noise.normal(n))?);
    let sigma = tape.softplus_op(rho)?;
    let scaled = tape.mul(sigma, eps)?;
    tape.add(mu, scaled)
}

/// One stochastic forward pass through the staged model.
///
/// Draw order per layer: weight ε, bias ε, then the dropout mask — fixed so
/// that a given stream state always yields a bit-identical pass.
pub fn forward_sampled(
    tape: &mut Tape,
    staged: &StagedModel,
    x: Var,
    noise: &mut NoiseStream,
) -> Result<Var, TensorError> {
    let mut h = x;
    for l in 0..staged.layer_count() {
        let (w, b) = match staged.weight_mode {
            WeightMode::Variational => (
                sample_weights(tape, staged.mu_w[l], staged.rho_w[l], noise)?,
                sample_weights(tape, staged.mu_b[l], staged.rho_b[l], noise)?,
            ),
            WeightMode::MeanOnly => (staged.mu_w[l], staged.mu_b[l]),
        };
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        h = match staged.activations[l] {
            Activation::Identity => h,
            Activation::Relu => tape.relu(h)?,
            Activation::Tanh => tape.tanh(h)?,
        };
        if let Some(layer) = &staged.dropouts[l] {
            let n = tape.value(h).numel();
            let uniforms = noise.uniform(n);
            h = crate::dropout::dropout_forward(tape, layer, h, &uniforms)?;
        }
    }
    Ok(h)
}

/// Deterministic forward with weights fixed to μ and dropout inactive,
/// for oracles that compare against a plain MLP.
pub fn forward_deterministic(
    tape: &mut Tape,
    staged: &StagedModel,
    x: Var,
) -> Result<Var, TensorError> {
    let mut h = x;
    for l in 0..staged.layer_count() {
        h = tape.matmul(h, staged.mu_w[l])?;
        h = tape.add_bias(h, staged.mu_b[l])?;
        h = match staged.activations[l] {
            Activation::Identity => h,
            Activation::Relu => tape.relu(h)?,
            Activation::Tanh => tape.tanh(h)?,
        };
    }
    Ok(h)
}

/// Closed-form KL( q ‖ N(0, I) ) summed over the given parameters,
/// differentiable w.r.t. every μ and ρ:
/// ½ Σ_i (σ_i² + μ_i² − 1 − ln σ_i²).
pub fn kl_to_standard_normal(
    tape: &mut Tape,
    staged: &StagedModel,
) -> Result<Var, TensorError> {
    let mut total: Option<Var> = None;
    for l in 0..staged.layer_count() {
        for (mu, rho) in [
            (staged.mu_w[l], staged.rho_w[l]),
            (staged.mu_b[l], staged.rho_b[l]),
        ] {
            let sigma = tape.softplus_op(rho)?;
            let sigma2 = tape.mul(sigma, sigma)?;
            let mu2 = tape.mul(mu, mu)?;
            // softplus underflows to 0 for ρ < −745; keep the log finite so
            // a diverged run is reported as a numeric abort, not a panic
            let sigma2_safe = tape.clamp_min(sigma2, f64::MIN_POSITIVE)?;
            let log_sigma2 = tape.log(sigma2_safe)?;
            let s = tape.add(sigma2, mu2)?;
            let s = tape.add_scalar(s, -1.0)?;
            let s = tape.sub(s, log_sigma2)?;
            let part = tape.sum(s)?;
            total = Some(match total {
                None => part,
                Some(t) => tape.add(t, part)?,
            });
        }
    }
    let total = total.expect("model has at least one layer");
    tape.scale(total, 0.5)
}

/// Closed-form KL value for a single (μ, σ) Gaussian against N(0, 1).
pub fn kl_gaussian_scalar(mu: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    0.5 * (s2 + mu * mu - 1.0 - s2.ln())
}
