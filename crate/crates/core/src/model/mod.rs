//! Frozen encoder with task/sensitive bottleneck adapters, noise injection on
//! the sensitive embedding, embedding fusion and the two classification heads.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC};

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{DiffError, Tape, Tensor, Var};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input has {got} features, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
        }
    }

    fn code(self) -> f64 {
        match self {
            Activation::Tanh => 0.0,
            Activation::Relu => 1.0,
        }
    }

    fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Shape and seed of the frozen encoder stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(ModelError::Config(format!(
                "encoder dims must be >= 1 (input_dim={}, hidden_dim={}, num_layers={})",
                self.input_dim, self.hidden_dim, self.num_layers
            )));
        }
        Ok(())
    }
}

/// What the task head sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassifierInput {
    /// `[e_t, stop_gradient(e_s_noised)]`
    #[default]
    FairNvt,
    /// `[h]`, the frozen encoding without adapters.
    BackboneOnly,
    /// `[e_s, e_t]` without clipping or noise.
    ConcatNoNoise,
    /// `[z, e_t]` with `z` drawn from the injection distribution.
    PureNoiseConcat,
}

impl ClassifierInput {
    pub const ALL: [ClassifierInput; 4] = [
        ClassifierInput::FairNvt,
        ClassifierInput::BackboneOnly,
        ClassifierInput::ConcatNoNoise,
        ClassifierInput::PureNoiseConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierInput::FairNvt => "fairnvt",
            ClassifierInput::BackboneOnly => "backbone",
            ClassifierInput::ConcatNoNoise => "concat-no-noise",
            ClassifierInput::PureNoiseConcat => "pure-noise",
        }
    }

    /// Width of the task head input for embedding width `d`.
    pub fn fused_width(self, d: usize) -> usize {
        match self {
            ClassifierInput::BackboneOnly => d,
            _ => 2 * d,
        }
    }

    /// Whether the sensitive embedding reaches the task head; the
    /// orthogonality term is dropped when it does not.
    pub fn uses_sensitive_embedding(self) -> bool {
        matches!(self, ClassifierInput::FairNvt | ClassifierInput::ConcatNoNoise)
    }

    fn code(self) -> f64 {
        match self {
            ClassifierInput::FairNvt => 0.0,
            ClassifierInput::BackboneOnly => 1.0,
            ClassifierInput::ConcatNoNoise => 2.0,
            ClassifierInput::PureNoiseConcat => 3.0,
        }
    }

    fn from_code(code: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }
}

impl fmt::Display for ClassifierInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierInput {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown classifier input variant `{s}`")))
    }
}

/// Clip-then-noise parameters for the sensitive embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Noise multiplier; per-coordinate standard deviation is `clip * sigma`.
    pub sigma: f64,
    /// L2 clip threshold.
    pub clip: f64,
    pub enabled: bool,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ModelError::Config(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(ModelError::Config(format!(
                "clip threshold must be > 0, got {}",
                self.clip
            )));
        }
        Ok(())
    }

    /// Per-coordinate standard deviation actually applied.
    pub fn std_dev(&self) -> f64 {
        if self.enabled {
            self.clip * self.sigma
        } else {
            0.0
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            clip: 10.0,
            enabled: true,
        }
    }
}

/// Everything needed to rebuild the network shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub task_reduction: usize,
    pub sens_reduction: usize,
    pub head_hidden_layers: usize,
    pub task_classes: usize,
    pub sens_classes: usize,
    pub variant: ClassifierInput,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        let d = self.encoder.hidden_dim;
        for (name, r) in [("task", self.task_reduction), ("sensitive", self.sens_reduction)] {
            if r == 0 || !d.is_multiple_of(r) || d / r == 0 {
                return Err(ModelError::Config(format!(
                    "{name} reduction factor {r} must divide hidden_dim {d}"
                )));
            }
        }
        if self.task_classes < 2 || self.sens_classes < 2 {
            return Err(ModelError::Config(
                "need at least two task and sensitive classes".into(),
            ));
        }
        Ok(())
    }
}

/// Dense layer `y = x·W + b` with `W[in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn random(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Frozen stand-in for a pretrained backbone: seeded dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    pub activation: Activation,
    pub layers: Vec<Linear>,
}

/// Builds the frozen encoder from its seed. Same config, same weights.
pub fn init_frozen_encoder(cfg: &EncoderConfig) -> Result<FrozenEncoder, ModelError> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::FrozenEncoder, 0);
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let fan_in = if l == 0 { cfg.input_dim } else { cfg.hidden_dim };
            Linear::random(&mut rng, fan_in, cfg.hidden_dim)
        })
        .collect();
    Ok(FrozenEncoder {
        activation: cfg.activation,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub down: Linear,
    pub up: Linear,
}

/// Residual bottleneck adapters, one per frozen layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub reduction: usize,
    pub layers: Vec<AdapterLayer>,
}

impl Adapter {
    fn init(rng: &mut Rng, hidden: usize, reduction: usize, num_layers: usize) -> Self {
        let bottleneck = hidden / reduction;
        let layers = (0..num_layers)
            .map(|_| AdapterLayer {
                down: Linear::random(rng, hidden, bottleneck),
                // zero up-projection: the adapter starts as the identity map
                up: Linear::zeros(bottleneck, hidden),
            })
            .collect();
        Self { reduction, layers }
    }
}

/// MLP head: `hidden_layers` × (linear, tanh) then an output linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl Head {
    pub fn init(rng: &mut Rng, in_dim: usize, hidden_layers: usize, classes: usize) -> Self {
        let hidden = (0..hidden_layers)
            .map(|_| Linear::random(rng, in_dim, in_dim))
            .collect();
        Self {
            hidden,
            output: Linear::random(rng, in_dim, classes),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.output.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.output.out_dim()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("{prefix}.hidden{i}.weight"), &l.weight));
            out.push((format!("{prefix}.hidden{i}.bias"), &l.bias));
        }
        out.push((format!("{prefix}.output.weight"), &self.output.weight));
        out.push((format!("{prefix}.output.bias"), &self.output.bias));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.push((format!("{prefix}.hidden{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}.hidden{i}.bias"), &mut l.bias));
        }
        out.push((format!("{prefix}.output.weight"), &mut self.output.weight));
        out.push((format!("{prefix}.output.bias"), &mut self.output.bias));
        out
    }

    /// Records the head on `tape`, parameters as leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        let bind = |tape: &mut Tape, l: &Linear| BoundLinear {
            weight: tape.leaf(l.weight.clone()),
            bias: tape.leaf(l.bias.clone()),
        };
        BoundHead {
            hidden: self.hidden.iter().map(|l| bind(tape, l)).collect(),
            output: bind(tape, &self.output),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_bias(xw, self.bias)
    }

    fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct BoundHead {
    pub hidden: Vec<BoundLinear>,
    pub output: BoundLinear,
}

impl BoundHead {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for l in &self.hidden {
            let z = l.apply(tape, h)?;
            h = tape.tanh(z);
        }
        self.output.apply(tape, h)
    }

    /// Parameter handles in the same order as [`Head::named`].
    pub fn vars(&self) -> Vec<Var> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .flat_map(BoundLinear::vars)
            .collect()
    }
}

#[derive(Debug, Clone)]
struct BoundAdapter {
    layers: Vec<(BoundLinear, BoundLinear)>,
}

/// All weights: frozen encoder plus trainable adapters and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: FrozenEncoder,
    pub task_adapter: Adapter,
    pub sens_adapter: Adapter,
    pub task_head: Head,
    pub sens_head: Head,
}

fn adapter_named<'a>(prefix: &str, a: &'a Adapter) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    for (i, l) in a.layers.iter().enumerate() {
        out.push((format!("{prefix}.layer{i}.down.weight"), &l.down.weight));
        out.push((format!("{prefix}.layer{i}.down.bias"), &l.down.bias));
        out.push((format!("{prefix}.layer{i}.up.weight"), &l.up.weight));
        out.push((format!("{prefix}.layer{i}.up.bias"), &l.up.bias));
    }
    out
}

fn adapter_named_mut<'a>(prefix: &str, a: &'a mut Adapter) -> Vec<(String, &'a mut Tensor)> {
    let mut out = Vec::new();
    for (i, l) in a.layers.iter_mut().enumerate() {
        out.push((format!("{prefix}.layer{i}.down.weight"), &mut l.down.weight));
        out.push((format!("{prefix}.layer{i}.down.bias"), &mut l.down.bias));
        out.push((format!("{prefix}.layer{i}.up.weight"), &mut l.up.weight));
        out.push((format!("{prefix}.layer{i}.up.bias"), &mut l.up.bias));
    }
    out
}

impl ModelParams {
    /// Trainable tensors with stable names. Order matches [`BoundParams::trainable`].
    pub fn named_trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = adapter_named("task_adapter", &self.task_adapter);
        out.extend(adapter_named("sens_adapter", &self.sens_adapter));
        out.extend(self.task_head.named("task_head"));
        out.extend(self.sens_head.named("sens_head"));
        out
    }

    pub fn named_trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = adapter_named_mut("task_adapter", &mut self.task_adapter);
        out.extend(adapter_named_mut("sens_adapter", &mut self.sens_adapter));
        out.extend(self.task_head.named_mut("task_head"));
        out.extend(self.sens_head.named_mut("sens_head"));
        out
    }

    pub fn named_frozen(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.layer{i}.weight"), &l.weight));
            out.push((format!("encoder.layer{i}.bias"), &l.bias));
        }
        out
    }

    /// SHA-256 over the frozen weights (names, shapes and little-endian values).
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.named_frozen() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Records all weights on `tape`: frozen ones as constants, the rest as leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| BoundLinear {
                weight: tape.constant(l.weight.clone()),
                bias: tape.constant(l.bias.clone()),
            })
            .collect();
        let mut bind_adapter = |a: &Adapter| BoundAdapter {
            layers: a
                .layers
                .iter()
                .map(|l| {
                    (
                        BoundLinear {
                            weight: tape.leaf(l.down.weight.clone()),
                            bias: tape.leaf(l.down.bias.clone()),
                        },
                        BoundLinear {
                            weight: tape.leaf(l.up.weight.clone()),
                            bias: tape.leaf(l.up.bias.clone()),
                        },
                    )
                })
                .collect(),
        };
        let task_adapter = bind_adapter(&self.task_adapter);
        let sens_adapter = bind_adapter(&self.sens_adapter);
        let task_head = self.task_head.bind(tape);
        let sens_head = self.sens_head.bind(tape);
        BoundParams {
            activation: self.encoder.activation,
            encoder,
            task_adapter,
            sens_adapter,
            task_head,
            sens_head,
        }
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    activation: Activation,
    encoder: Vec<BoundLinear>,
    task_adapter: BoundAdapter,
    sens_adapter: BoundAdapter,
    task_head: BoundHead,
    sens_head: BoundHead,
}

fn adapter_vars(a: &BoundAdapter) -> impl Iterator<Item = Var> + '_ {
    a.layers
        .iter()
        .flat_map(|(down, up)| down.vars().into_iter().chain(up.vars()))
}

impl BoundParams {
    /// Trainable handles in [`ModelParams::named_trainable`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out: Vec<Var> = adapter_vars(&self.task_adapter).collect();
        out.extend(adapter_vars(&self.sens_adapter));
        out.extend(self.task_head.vars());
        out.extend(self.sens_head.vars());
        out
    }

    /// Handles of the sensitive adapter only.
    pub fn sensitive_adapter(&self) -> Vec<Var> {
        adapter_vars(&self.sens_adapter).collect()
    }

    pub fn task_adapter(&self) -> Vec<Var> {
        adapter_vars(&self.task_adapter).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Task,
    Sensitive,
}

/// Runs `x` through the frozen layers, applying the branch's adapter after
/// each one; `None` gives the bare frozen encoding.
pub fn encode_with_adapter(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    branch: Option<Branch>,
) -> Result<Var, DiffError> {
    let adapter = branch.map(|b| match b {
        Branch::Task => &bound.task_adapter,
        Branch::Sensitive => &bound.sens_adapter,
    });
    let mut h = x;
    for (l, layer) in bound.encoder.iter().enumerate() {
        let z = layer.apply(tape, h)?;
        h = bound.activation.apply(tape, z);
        if let Some(a) = adapter {
            let (down, up) = &a.layers[l];
            let d = down.apply(tape, h)?;
            let d = tape.tanh(d);
            let u = up.apply(tape, d)?;
            h = tape.add(h, u)?;
        }
    }
    Ok(h)
}

/// Draws `rows × dim` i.i.d. `Normal(0, (clip·sigma)²)` values, or `None` when
/// the configured standard deviation is zero (no draws are consumed).
pub fn sample_noise(rows: usize, dim: usize, cfg: &NoiseConfig, rng: &mut Rng) -> Option<Tensor> {
    let std = cfg.std_dev();
    if std == 0.0 {
        return None;
    }
    let data = (0..rows * dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Some(Tensor::from_parts(vec![rows, dim], data))
}

/// Clips `e_s` row-wise to norm `clip`, then adds fresh Gaussian noise.
/// Returns `(e_s_clip, e_s_noised)`; the noise is a tape constant.
pub fn inject_noise(tape: &mut Tape, e_s: Var, cfg: &NoiseConfig, rng: &mut Rng) -> Result<(Var, Var), ModelError> {
    cfg.validate()?;
    let clipped = tape.l2_clip(e_s, cfg.clip)?;
    let (rows, cols) = (tape.value(clipped).rows(), tape.value(clipped).cols());
    let noised = match sample_noise(rows, cols, cfg, rng) {
        Some(z) => {
            let z = tape.constant(z.with_shape(tape.value(clipped).shape().to_vec()));
            tape.add(clipped, z)?
        }
        None => clipped,
    };
    Ok((clipped, noised))
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    pub e_t: Var,
    pub e_s: Var,
    pub e_s_clip: Var,
    pub e_s_noised: Var,
    /// Task head input.
    pub e_f: Var,
    pub task_logits: Var,
    pub sens_logits: Var,
}

/// Architecture, noise settings and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub noise: NoiseConfig,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model: frozen encoder from `arch.encoder.seed`, trainable weights
    /// from the param-init stream of `init_seed`.
    pub fn init(arch: Architecture, noise: NoiseConfig, init_seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        noise.validate()?;
        let encoder = init_frozen_encoder(&arch.encoder)?;
        let mut rng = rng::stream(init_seed, Stream::ParamInit, 0);
        let d = arch.encoder.hidden_dim;
        let l = arch.encoder.num_layers;
        let task_adapter = Adapter::init(&mut rng, d, arch.task_reduction, l);
        let sens_adapter = Adapter::init(&mut rng, d, arch.sens_reduction, l);
        let task_head = Head::init(
            &mut rng,
            arch.variant.fused_width(d),
            arch.head_hidden_layers,
            arch.task_classes,
        );
        let sens_head = Head::init(&mut rng, d, arch.head_hidden_layers, arch.sens_classes);
        Ok(Self {
            arch,
            noise,
            params: ModelParams {
                encoder,
                task_adapter,
                sens_adapter,
                task_head,
                sens_head,
            },
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.arch.encoder.hidden_dim
    }

    pub fn fused_width(&self) -> usize {
        self.arch.variant.fused_width(self.hidden_dim())
    }

    /// Full training-path forward pass over a batch `x[n×d_in]`.
    ///
    /// The sensitive head always reads the clean `e_s`. Noise is drawn from
    /// `rng` per sample on every call.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        rng: &mut Rng,
    ) -> Result<ForwardOutputs, ModelError> {
        let got = x.cols();
        if x.rank() != 2 || got != self.arch.encoder.input_dim {
            return Err(ModelError::InputDim {
                expected: self.arch.encoder.input_dim,
                got,
            });
        }
        let x = tape.constant(x.clone());
        let e_t = encode_with_adapter(tape, bound, x, Some(Branch::Task))?;
        let e_s = encode_with_adapter(tape, bound, x, Some(Branch::Sensitive))?;
        let (e_s_clip, e_s_noised) = inject_noise(tape, e_s, &self.noise, rng)?;
        let e_f = match self.arch.variant {
            ClassifierInput::FairNvt => {
                let blocked = tape.stop_gradient(e_s_noised);
                tape.concat(e_t, blocked)?
            }
            ClassifierInput::BackboneOnly => encode_with_adapter(tape, bound, x, None)?,
            ClassifierInput::ConcatNoNoise => tape.concat(e_s, e_t)?,
            ClassifierInput::PureNoiseConcat => {
                let (rows, d) = (tape.value(e_t).rows(), self.hidden_dim());
                let z = sample_noise(rows, d, &self.noise, rng).unwrap_or_else(|| Tensor::zeros(&[rows, d]));
                let z = tape.constant(z);
                tape.concat(z, e_t)?
            }
        };
        let task_logits = bound.task_head.forward(tape, e_f)?;
        let sens_logits = bound.sens_head.forward(tape, e_s)?;
        Ok(ForwardOutputs {
            e_t,
            e_s,
            e_s_clip,
            e_s_noised,
            e_f,
            task_logits,
            sens_logits,
        })
    }
}
