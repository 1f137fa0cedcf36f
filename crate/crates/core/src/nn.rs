//! Parameter containers and the two architecture templates: a plain MLP and
//! a dilated temporal convolution stack evaluated in strided form.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
    LeakyRelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Silu => x.silu(),
            Activation::LeakyRelu => x.leaky_relu(0.2),
        }
    }
}

/// Shape-defining description of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected layers; activation between layers, none on the output.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        activation: Activation,
    },
    /// Temporal convolutions over `frames` frames of `in_features` values.
    /// An expansion conv is followed by `blocks` residual blocks whose
    /// dilations are `kernel^1, kernel^2, ...`; only the centre output frame
    /// is produced.
    TemporalConv {
        frames: usize,
        in_features: usize,
        channels: usize,
        blocks: usize,
        kernel: usize,
        output: usize,
        activation: Activation,
    },
}

impl Architecture {
    pub fn mlp(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        Architecture::Mlp {
            input,
            hidden: hidden.to_vec(),
            output,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp { input, .. } => *input,
            Architecture::TemporalConv {
                frames, in_features, ..
            } => frames * in_features,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Architecture::Mlp { output, .. } | Architecture::TemporalConv { output, .. } => *output,
        }
    }

    /// Per-layer dilations of a temporal stack (expansion layer first).
    pub fn dilations(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp { .. } => Vec::new(),
            Architecture::TemporalConv { blocks, kernel, .. } => (0..=*blocks).map(|i| kernel.pow(i as u32)).collect(),
        }
    }

    /// Frames seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        match self {
            Architecture::Mlp { .. } => 1,
            Architecture::TemporalConv { kernel, .. } => {
                1 + self.dilations().iter().map(|d| (kernel - 1) * d).sum::<usize>()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp {
                input, hidden, output, ..
            } => {
                if *input == 0 || *output == 0 || hidden.contains(&0) {
                    return Err(Error::config("architecture", "zero-width layer"));
                }
            }
            Architecture::TemporalConv {
                frames,
                in_features,
                channels,
                kernel,
                output,
                ..
            } => {
                if *kernel < 2 || kernel % 2 == 0 {
                    return Err(Error::config("architecture.kernel", "must be odd and >= 3"));
                }
                if *in_features == 0 || *channels == 0 || *output == 0 {
                    return Err(Error::config("architecture", "zero-width layer"));
                }
                let rf = self.receptive_field();
                if rf < *frames {
                    return Err(Error::config(
                        "architecture.frames",
                        format!("receptive field {rf} smaller than {frames} frames"),
                    ));
                }
                if rf != *frames {
                    return Err(Error::config(
                        "architecture.frames",
                        format!("strided evaluation needs frames == receptive field ({rf})"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.weight"), (fan_in, fan_out)));
            out.push((format!("{name}.bias"), (1, fan_out)));
        };
        match self {
            Architecture::Mlp {
                input, hidden, output, ..
            } => {
                let mut dims = vec![*input];
                dims.extend(hidden);
                dims.push(*output);
                for (i, w) in dims.windows(2).enumerate() {
                    linear(&format!("layer{i}"), w[0], w[1]);
                }
            }
            Architecture::TemporalConv {
                in_features,
                channels,
                blocks,
                kernel,
                output,
                ..
            } => {
                linear("expand", kernel * in_features, *channels);
                for b in 0..*blocks {
                    linear(&format!("block{b}.conv"), kernel * channels, *channels);
                    linear(&format!("block{b}.fuse"), *channels, *channels);
                }
                linear("head", *channels, *output);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }
}

/// A model: descriptor plus parameter tensors in descriptor order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamModel {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl ParamModel {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = arch.param_shapes().iter().map(|(_, s)| Tensor::zeros(*s)).collect();
        Ok(Self { arch, params })
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let shapes = model.arch.param_shapes();
        for ((name, (fan_in, _)), p) in shapes.iter().zip(&mut model.params) {
            if name.ends_with(".weight") {
                let std = (1.0 / *fan_in as f64).sqrt();
                p.mapv_inplace(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                });
            }
        }
        Ok(model)
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape(
                format!("{} parameter tensors", shapes.len()),
                params.len(),
            ));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.dim() != *shape {
                return Err(Error::shape(format!("{name} {shape:?}"), format!("{:?}", p.dim())));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.arch.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Zeroes the last layer so the model outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.fill(0.0);
        }
    }

    /// Short digest of the parameter bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        for p in &self.params {
            for v in p.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Parameters as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Parameters as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Records the forward pass of `input` (`[batch, input_dim]`).
    pub fn apply<'t>(&self, params: &[Var<'t>], input: Var<'t>) -> Result<Var<'t>> {
        let (rows, width) = input.shape();
        if width != self.arch.input_dim() {
            return Err(Error::shape(
                format!("[batch, {}]", self.arch.input_dim()),
                format!("[{rows}, {width}]"),
            ));
        }
        let linear = |x: Var<'t>, i: usize| x.matmul(params[2 * i]).add_row(params[2 * i + 1]);
        match &self.arch {
            Architecture::Mlp { hidden, activation, .. } => {
                let mut h = input;
                for i in 0..hidden.len() {
                    h = activation.apply(linear(h, i));
                }
                Ok(linear(h, hidden.len()))
            }
            Architecture::TemporalConv {
                frames,
                in_features,
                channels,
                blocks,
                kernel,
                activation,
                ..
            } => {
                let (k, c) = (*kernel, *channels);
                // Each conv with dilation k^i is evaluated only at the frames
                // the centre output needs, i.e. as a stride-k conv.
                let mut n = frames / k;
                let mut h = activation.apply(linear(input.reshape(rows * n, k * in_features), 0));
                for b in 0..*blocks {
                    n /= k;
                    let grouped = h.reshape(rows * n, k * c);
                    let residual = grouped.slice_cols(c * (k / 2), c);
                    let conv = activation.apply(linear(grouped, 1 + 2 * b));
                    let fused = activation.apply(linear(conv, 2 + 2 * b));
                    h = residual.add(fused);
                }
                debug_assert_eq!(n, 1);
                Ok(linear(h, 1 + 2 * blocks))
            }
        }
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind_frozen(&tape);
        let x = tape.constant(input.clone());
        Ok(self.apply(&params, x)?.to_tensor())
    }
}

/// An ordered, named group of models trained together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelSet {
    names: Vec<String>,
    models: Vec<ParamModel>,
}

impl ModelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, model: ParamModel) {
        self.names.push(name.into());
        self.models.push(model);
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn models(&self) -> &[ParamModel] {
        &self.models
    }

    pub fn models_mut(&mut self) -> &mut [ParamModel] {
        &mut self.models
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamModel> {
        self.index_of(name).map(|i| &self.models[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamModel> {
        self.index_of(name).map(move |i| &mut self.models[i])
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Vec<Var<'t>>> {
        self.models.iter().map(|m| m.bind(tape)).collect()
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Vec<Var<'t>>> {
        self.models.iter().map(|m| m.bind_frozen(tape)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.models.iter().all(ParamModel::is_finite)
    }

    pub fn param_count(&self) -> usize {
        self.models.iter().map(ParamModel::param_count).sum()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, m) in self.names.iter().zip(&self.models) {
            h.update(n.as_bytes());
            h.update(m.digest().as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Parameter gradients, aligned with [`ParamModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(model: &ParamModel) -> Self {
        Gradients(model.params.iter().map(|p| Tensor::zeros(p.dim())).collect())
    }

    pub fn from_vars(vars: &[Var<'_>]) -> Self {
        Gradients(vars.iter().map(|v| v.to_tensor()).collect())
    }

    pub fn check_finite(&self, model: &ParamModel) -> Result<()> {
        for (name, g) in model.param_names().into_iter().zip(&self.0) {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient of a scalar loss built from the model's parameters.
///
/// `loss_fn` receives the tape and the bound parameter leaves and returns a
/// `1x1` loss.
pub fn gradient<F>(model: &ParamModel, loss_fn: F) -> Result<(f64, Gradients)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let params = model.bind(&tape);
    let loss = loss_fn(&tape, &params)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let grads = Gradients::from_vars(&tape.grad(loss, &params));
    grads.check_finite(model)?;
    Ok((value, grads))
}

/// Like [`gradient`] for several models trained on one loss. `loss_fn`
/// receives each model's bound parameters in order.
pub fn gradients<F>(models: &[&ParamModel], loss_fn: F) -> Result<(f64, Vec<Gradients>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Vec<Var<'t>>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let params: Vec<Vec<Var<'_>>> = models.iter().map(|m| m.bind(&tape)).collect();
    let loss = loss_fn(&tape, &params)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let flat: Vec<Var<'_>> = params.iter().flatten().copied().collect();
    let mut all = tape.grad(loss, &flat).into_iter();
    let mut out = Vec::with_capacity(models.len());
    for (m, p) in models.iter().zip(&params) {
        let g = Gradients::from_vars(&all.by_ref().take(p.len()).collect::<Vec<_>>());
        g.check_finite(m)?;
        out.push(g);
    }
    Ok((value, out))
}
