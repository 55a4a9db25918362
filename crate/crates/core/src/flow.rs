//! Invertible layers and their composition into a flow model.
//!
//! Every layer kind here is volume preserving: additive coupling has a unit
//! triangular Jacobian, squeeze and channel rotation are permutations and the
//! Hartley transform is orthonormal. The log-determinant is still tracked per
//! layer so the likelihood code does not depend on that fact.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Conv1dParams;
use crate::prior::ClassConditionalGaussian;
use crate::tensor::Tensor;

/// `conv1d -> relu -> conv1d`, mapping `C/2` channels to `C/2` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub hidden: Conv1dParams,
    pub output: Conv1dParams,
}

impl Subnet {
    fn validate(&self, half: usize) -> Result<()> {
        self.hidden.validate()?;
        self.output.validate()?;
        if self.hidden.c_in() != half || self.output.c_out() != half {
            return Err(Error::Shape {
                op: "coupling subnet",
                dim: "half channel count",
                expected: half,
                found: self.hidden.c_in(),
            });
        }
        if self.output.c_in() != self.hidden.c_out() {
            return Err(Error::Shape {
                op: "coupling subnet",
                dim: "hidden channels",
                expected: self.hidden.c_out(),
                found: self.output.c_in(),
            });
        }
        Ok(())
    }

    fn params(&self) -> [&Tensor; 4] {
        [
            &self.hidden.kernels,
            &self.hidden.bias,
            &self.output.kernels,
            &self.output.bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.hidden.kernels,
            &mut self.hidden.bias,
            &mut self.output.kernels,
            &mut self.output.bias,
        ]
    }

    /// Vars in `params()` order.
    fn apply(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.conv1d(x, vars[0], vars[1])?;
        let h = tape.relu(h);
        tape.conv1d(h, vars[2], vars[3])
    }
}

/// Additive coupling: `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)` on the first and
/// second half of the channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    pub f: Subnet,
    pub g: Subnet,
}

impl CouplingBlock {
    /// Subnets with zero weights everywhere: the identity map.
    pub fn identity(channels: usize, hidden: usize, kernel_size: usize) -> Result<Self> {
        let half = even_half(channels, "CouplingBlock::identity")?;
        let subnet = || -> Result<Subnet> {
            Ok(Subnet {
                hidden: Conv1dParams::zeros(hidden, half, kernel_size)?,
                output: Conv1dParams::zeros(half, hidden, kernel_size)?,
            })
        };
        Ok(Self {
            f: subnet()?,
            g: subnet()?,
        })
    }

    pub fn channels(&self) -> usize {
        2 * self.f.hidden.c_in()
    }

    pub fn validate(&self) -> Result<()> {
        let half = self.f.hidden.c_in();
        self.f.validate(half)?;
        self.g.validate(half)
    }

    const N_PARAMS: usize = 8;

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.f.params().into_iter().chain(self.g.params())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.f.params_mut().into_iter().chain(self.g.params_mut())
    }

    fn split(tape: &mut Tape, x: Var, c: usize, t: usize) -> Result<(Var, Var)> {
        let half = c / 2;
        let first: Arc<[usize]> = (0..half * t).collect();
        let second: Arc<[usize]> = (half * t..c * t).collect();
        Ok((
            tape.gather(x, first, &[half, t])?,
            tape.gather(x, second, &[half, t])?,
        ))
    }

    fn forward_on_tape(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let (c, t) = dims2(tape.value(x), "coupling_forward")?;
        even_half(c, "coupling_forward")?;
        let (x1, x2) = Self::split(tape, x, c, t)?;
        let fx2 = Subnet::apply(tape, &vars[..4], x2)?;
        let y1 = tape.add(fx2, x1)?;
        let gy1 = Subnet::apply(tape, &vars[4..], y1)?;
        let y2 = tape.add(gy1, x2)?;
        tape.concat(y1, y2)
    }

    fn inverse_on_tape(tape: &mut Tape, vars: &[Var], y: Var) -> Result<Var> {
        let (c, t) = dims2(tape.value(y), "coupling_inverse")?;
        even_half(c, "coupling_inverse")?;
        let (y1, y2) = Self::split(tape, y, c, t)?;
        let gy1 = Subnet::apply(tape, &vars[4..], y1)?;
        let x2 = tape.sub(y2, gy1)?;
        let fx2 = Subnet::apply(tape, &vars[..4], x2)?;
        let x1 = tape.sub(y1, fx2)?;
        tape.concat(x1, x2)
    }

    fn run(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = if inverse {
            Self::inverse_on_tape(&mut tape, &vars, xv)?
        } else {
            Self::forward_on_tape(&mut tape, &vars, xv)?
        };
        Ok(tape.value(out).clone())
    }
}

/// One invertible step of a [`FlowModel`].
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `(C, T) -> (2C, T/2)`: `out[2c, t] = x[c, 2t]`, `out[2c+1, t] = x[c, 2t+1]`.
    Squeeze,
    Coupling(CouplingBlock),
    /// `out[c] = x[(c + 1) mod C]`.
    RotateChannels,
    /// Orthonormal per-channel discrete Hartley transform.
    Hartley,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Squeeze => "squeeze",
            Layer::Coupling(_) => "coupling",
            Layer::RotateChannels => "rotate",
            Layer::Hartley => "hartley",
        }
    }

    pub fn output_shape(&self, (c, t): (usize, usize)) -> Result<(usize, usize)> {
        match self {
            Layer::Squeeze => {
                if t % 2 != 0 {
                    return Err(Error::invalid(
                        "squeeze",
                        format!("time length {t} must be even"),
                    ));
                }
                Ok((2 * c, t / 2))
            }
            Layer::Coupling(block) => {
                if block.channels() != c {
                    return Err(Error::Shape {
                        op: "coupling",
                        dim: "channels",
                        expected: block.channels(),
                        found: c,
                    });
                }
                Ok((c, t))
            }
            Layer::RotateChannels | Layer::Hartley => Ok((c, t)),
        }
    }

    /// `log |det J|` contributed by this layer.
    pub fn log_det_jacobian(&self) -> f64 {
        // all layer kinds are volume preserving
        0.0
    }

    fn n_params(&self) -> usize {
        match self {
            Layer::Coupling(_) => CouplingBlock::N_PARAMS,
            _ => 0,
        }
    }

    fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let (c, t) = dims2(tape.value(x), "layer forward")?;
        match self {
            Layer::Squeeze => {
                let shape = self.output_shape((c, t))?;
                tape.gather(x, squeeze_index(c, t), &[shape.0, shape.1])
            }
            Layer::Coupling(_) => CouplingBlock::forward_on_tape(tape, vars, x),
            Layer::RotateChannels => tape.gather(x, rotate_index(c, t, 1), &[c, t]),
            Layer::Hartley => tape.hartley(x),
        }
    }

    fn inverse_on_tape(&self, tape: &mut Tape, vars: &[Var], y: Var) -> Result<Var> {
        let (c, t) = dims2(tape.value(y), "layer inverse")?;
        match self {
            Layer::Squeeze => {
                if c % 2 != 0 {
                    return Err(Error::invalid(
                        "squeeze_inverse",
                        format!("channel count {c} must be even"),
                    ));
                }
                tape.gather(y, unsqueeze_index(c, t), &[c / 2, 2 * t])
            }
            Layer::Coupling(_) => CouplingBlock::inverse_on_tape(tape, vars, y),
            Layer::RotateChannels => tape.gather(y, rotate_index(c, t, c - 1), &[c, t]),
            Layer::Hartley => tape.hartley(y),
        }
    }
}

fn squeeze_index(c: usize, t: usize) -> Arc<[usize]> {
    let half = t / 2;
    (0..2 * c * half)
        .map(|flat| {
            let (oc, ot) = (flat / half, flat % half);
            (oc / 2) * t + 2 * ot + oc % 2
        })
        .collect()
}

/// Inverse of [`squeeze_index`] for an input of shape `(c, t)` (already squeezed).
fn unsqueeze_index(c: usize, t: usize) -> Arc<[usize]> {
    let full = 2 * t;
    (0..c * t)
        .map(|flat| {
            let (ic, s) = (flat / full, flat % full);
            (2 * ic + s % 2) * t + s / 2
        })
        .collect()
}

/// `out[ch] = x[(ch + shift) mod c]`.
fn rotate_index(c: usize, t: usize, shift: usize) -> Arc<[usize]> {
    (0..c * t)
        .map(|flat| {
            let (ch, s) = (flat / t, flat % t);
            ((ch + shift) % c) * t + s
        })
        .collect()
}

fn dims2(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if x.ndim() != 2 {
        return Err(Error::Shape {
            op,
            dim: "rank",
            expected: 2,
            found: x.ndim(),
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn even_half(c: usize, op: &'static str) -> Result<usize> {
    if !c.is_multiple_of(2) || c == 0 {
        return Err(Error::invalid(
            op,
            format!("channel count {c} must be even and nonzero"),
        ));
    }
    Ok(c / 2)
}

pub fn coupling_forward(block: &CouplingBlock, x: &Tensor) -> Result<Tensor> {
    block.run(x, false)
}

/// Exact inverse of [`coupling_forward`]; the subnets are evaluated, never inverted.
pub fn coupling_inverse(block: &CouplingBlock, y: &Tensor) -> Result<Tensor> {
    block.run(y, true)
}

fn run_layer(layer: Layer, x: &Tensor, inverse: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = if inverse {
        layer.inverse_on_tape(&mut tape, &[], xv)?
    } else {
        dims2(x, "layer forward")?;
        layer.output_shape((x.shape()[0], x.shape()[1]))?;
        layer.forward_on_tape(&mut tape, &[], xv)?
    };
    Ok(tape.value(out).clone())
}

pub fn squeeze_forward(x: &Tensor) -> Result<Tensor> {
    run_layer(Layer::Squeeze, x, false)
}

pub fn squeeze_inverse(y: &Tensor) -> Result<Tensor> {
    run_layer(Layer::Squeeze, y, true)
}

pub fn hartley_forward(x: &Tensor) -> Result<Tensor> {
    run_layer(Layer::Hartley, x, false)
}

/// Latent code and accumulated log-determinant of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowOutput {
    /// Flattened latent, length `C * T`.
    pub latent: Tensor,
    pub log_det_jacobian: f64,
}

/// Architecture hyper-parameters for [`build_architecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub channels: usize,
    pub samples: usize,
    pub n_classes: usize,
    /// `None` picks the largest `n <= 4` with `samples` divisible by `2^n`.
    pub n_stages: Option<usize>,
    pub kernel_size: usize,
    /// Hidden channels = `hidden_factor * (C / 2)` inside each subnet.
    pub hidden_factor: usize,
    /// Seed for the first subnet convolution; the second starts at zero.
    pub init_seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            samples: 512,
            n_classes: 2,
            n_stages: None,
            kernel_size: 7,
            hidden_factor: 2,
            init_seed: 0,
        }
    }
}

pub const MAX_DEFAULT_STAGES: usize = 4;

impl ArchitectureConfig {
    /// Largest number of stages `samples` allows (no cap).
    pub fn max_stages(&self) -> usize {
        if self.samples == 0 {
            return 0;
        }
        self.samples.trailing_zeros() as usize
    }

    pub fn resolved_stages(&self) -> usize {
        self.n_stages
            .unwrap_or_else(|| self.max_stages().min(MAX_DEFAULT_STAGES))
    }
}

/// `n_stages` repetitions of `[squeeze, coupling, coupling, rotate]` followed
/// by one Hartley layer.
pub fn build_architecture(config: &ArchitectureConfig) -> Result<FlowModel> {
    if config.channels == 0 || config.samples == 0 {
        return Err(Error::invalid(
            "build_architecture",
            "channels and samples must be positive",
        ));
    }
    if config.kernel_size.is_multiple_of(2) || config.hidden_factor == 0 {
        return Err(Error::invalid(
            "build_architecture",
            "kernel_size must be odd and hidden_factor positive",
        ));
    }
    let stages = config.resolved_stages();
    if stages > config.max_stages() {
        return Err(Error::invalid(
            "build_architecture",
            format!(
                "{stages} stages need T divisible by 2^{stages}; T = {} allows at most {}",
                config.samples,
                config.max_stages()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut layers = Vec::with_capacity(4 * stages + 1);
    let (mut c, mut t) = (config.channels, config.samples);
    for _ in 0..stages {
        layers.push(Layer::Squeeze);
        c *= 2;
        t /= 2;
        let half = c / 2;
        let hidden = config.hidden_factor * half;
        if config.kernel_size > 2 * t - 1 {
            return Err(Error::invalid(
                "build_architecture",
                format!(
                    "kernel size {} too wide for time length {t} at this stage",
                    config.kernel_size
                ),
            ));
        }
        for _ in 0..2 {
            let mut block = CouplingBlock::identity(c, hidden, config.kernel_size)?;
            for subnet in [&mut block.f, &mut block.g] {
                let bound = 1.0 / ((half * config.kernel_size) as f64).sqrt();
                for w in subnet.hidden.kernels.data_mut() {
                    *w = rng.random_range(-bound..bound);
                }
            }
            layers.push(Layer::Coupling(block));
        }
        layers.push(Layer::RotateChannels);
    }
    layers.push(Layer::Hartley);
    let prior = ClassConditionalGaussian::standard(config.n_classes, config.channels * config.samples)?;
    FlowModel::new((config.channels, config.samples), layers, prior)
}

/// Ordered invertible layers plus the class-conditional latent prior.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    input_shape: (usize, usize),
    layers: Vec<Layer>,
    prior: ClassConditionalGaussian,
}

/// A model's parameters registered on a tape, in [`FlowModel::params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn prior_means(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }

    pub fn prior_log_stds(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }
}

impl FlowModel {
    pub fn new(
        input_shape: (usize, usize),
        layers: Vec<Layer>,
        prior: ClassConditionalGaussian,
    ) -> Result<Self> {
        let mut shape = input_shape;
        for layer in &layers {
            if let Layer::Coupling(block) = layer {
                block.validate()?;
            }
            shape = layer.output_shape(shape)?;
        }
        let d = input_shape.0 * input_shape.1;
        if shape.0 * shape.1 != d || prior.dim() != d {
            return Err(Error::Shape {
                op: "FlowModel::new",
                dim: "latent dimension",
                expected: d,
                found: prior.dim(),
            });
        }
        Ok(Self {
            input_shape,
            layers,
            prior,
        })
    }

    /// Layers absent, standard-normal prior: `f` is the identity.
    pub fn identity(input_shape: (usize, usize), n_classes: usize) -> Result<Self> {
        let prior = ClassConditionalGaussian::standard(n_classes, input_shape.0 * input_shape.1)?;
        Self::new(input_shape, Vec::new(), prior)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.input_shape.0 * self.input_shape.1
    }

    /// Shape after the last layer, before flattening.
    pub fn output_shape(&self) -> (usize, usize) {
        self.layers
            .iter()
            .try_fold(self.input_shape, |s, l| l.output_shape(s))
            .expect("validated at construction")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn prior(&self) -> &ClassConditionalGaussian {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: ClassConditionalGaussian) -> Result<()> {
        if prior.dim() != self.latent_dim() {
            return Err(Error::Shape {
                op: "set_prior",
                dim: "latent dimension",
                expected: self.latent_dim(),
                found: prior.dim(),
            });
        }
        self.prior = prior;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.prior.n_classes()
    }

    /// All trainable tensors: coupling subnets in layer order, then the
    /// prior means and log-stds.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for layer in &self.layers {
            if let Layer::Coupling(block) = layer {
                out.extend(block.params());
            }
        }
        out.push(self.prior.means());
        out.push(self.prior.log_stds());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Coupling(block) = layer {
                out.extend(block.params_mut());
            }
        }
        out.extend(self.prior.params_mut());
        out
    }

    /// Human-readable names matching [`FlowModel::params`].
    pub fn param_names(&self) -> Vec<String> {
        const PARTS: [&str; 8] = [
            "f.hidden.kernels",
            "f.hidden.bias",
            "f.output.kernels",
            "f.output.bias",
            "g.hidden.kernels",
            "g.hidden.bias",
            "g.output.kernels",
            "g.output.bias",
        ];
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Coupling(_)) {
                out.extend(PARTS.iter().map(|p| format!("layer{i}.{p}")));
            }
        }
        out.push("prior.means".into());
        out.push("prior.log_stds".into());
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers every parameter on `tape`: as [`ParamId`]-tagged nodes when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable {
                    tape.param(ParamId(i), p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, t) = self.input_shape;
        if x.shape() != [c, t] {
            let (dim, expected, found) = if x.ndim() != 2 {
                ("rank", 2, x.ndim())
            } else if x.shape()[0] != c {
                ("channels", c, x.shape()[0])
            } else {
                ("time samples", t, x.shape()[1])
            };
            return Err(Error::Shape {
                op: "flow_forward",
                dim,
                expected,
                found,
            });
        }
        Ok(())
    }

    /// Records `f(x)` and returns the flattened latent node.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut cur = x;
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.n_params();
            cur = layer.forward_on_tape(tape, &bound.vars[offset..offset + n], cur)?;
            offset += n;
        }
        tape.reshape(cur, &[self.latent_dim()])
    }

    /// Records `f^{-1}(h)` and returns a `(C, T)` node.
    pub fn inverse_on_tape(&self, tape: &mut Tape, bound: &BoundParams, h: Var) -> Result<Var> {
        let d = self.latent_dim();
        if tape.value(h).len() != d {
            return Err(Error::Shape {
                op: "flow_inverse",
                dim: "latent dimension",
                expected: d,
                found: tape.value(h).len(),
            });
        }
        let (oc, ot) = self.output_shape();
        let mut cur = tape.reshape(h, &[oc, ot])?;
        let mut offset: usize = self.layers.iter().map(Layer::n_params).sum();
        for layer in self.layers.iter().rev() {
            let n = layer.n_params();
            offset -= n;
            cur = layer.inverse_on_tape(tape, &bound.vars[offset..offset + n], cur)?;
        }
        Ok(cur)
    }

    pub fn log_det_jacobian(&self) -> f64 {
        self.layers.iter().map(Layer::log_det_jacobian).sum()
    }

    /// Density of `x` under class `y`: `log p_H(f(x) | y) + log |det J|`.
    pub fn log_likelihood(&self, x: &Tensor, y: usize) -> Result<f64> {
        let out = flow_forward(self, x)?;
        Ok(self.prior.log_prob(&out.latent, y)? + out.log_det_jacobian)
    }

    /// Class-marginal density of `x` (uniform class weights).
    pub fn log_likelihood_marginal(&self, x: &Tensor) -> Result<f64> {
        let out = flow_forward(self, x)?;
        Ok(self.prior.log_prob_marginal(&out.latent)? + out.log_det_jacobian)
    }
}

pub fn flow_forward(model: &FlowModel, x: &Tensor) -> Result<FlowOutput> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let latent = model.forward_on_tape(&mut tape, &bound, xv)?;
    Ok(FlowOutput {
        latent: tape.value(latent).clone(),
        log_det_jacobian: model.log_det_jacobian(),
    })
}

pub fn flow_inverse(model: &FlowModel, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let hv = tape.constant(h.clone());
    let x = model.inverse_on_tape(&mut tape, &bound, hv)?;
    Ok(tape.value(x).clone())
}
