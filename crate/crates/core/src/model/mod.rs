//! Encoders, tokens, predictor, losses and the EMA target update.

mod forward;
mod losses;

pub use forward::{apply_tokens, encode_bev, forward, forward_with, predict, stack_features, ForwardVars, ParamVars};
pub use losses::{
    embedding_spread, jepa_loss, total_loss, variance_hinge, variance_reg_loss, HingeOutput, JepaTerms, RegOptions,
    RegPooling, RegTerms,
};

use std::fmt;
use std::str::FromStr;

use adljepa_autodiff::Tensor;
use rand::Rng;

use crate::bev::{GridSpec, FEATURE_CHANNELS};
use crate::rng::{keyed_rng, Stream};
use crate::{CoreError, Result};

pub const KERNEL: usize = 3;

/// Which cells of the target branch are overwritten by the empty token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetEmptyRule {
    /// Unmasked empty cells only; masked cells keep the target encoder output.
    UnmaskedOnly,
    /// Every empty cell, masked or not.
    AllEmpty,
}

impl FromStr for TargetEmptyRule {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unmasked_only" => Ok(Self::UnmaskedOnly),
            "all_empty" => Ok(Self::AllEmpty),
            o => Err(CoreError::Config(format!("target_empty_rule: unknown value '{o}'"))),
        }
    }
}

impl fmt::Display for TargetEmptyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UnmaskedOnly => "unmasked_only",
            Self::AllEmpty => "all_empty",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub encoder_channels: [usize; 3],
    pub predictor_depth: usize,
    pub use_empty_token: bool,
    pub use_mask_token: bool,
    pub target_empty_rule: TargetEmptyRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            encoder_channels: [32, 64, 128],
            predictor_depth: 3,
            use_empty_token: true,
            use_mask_token: true,
            target_empty_rule: TargetEmptyRule::AllEmpty,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.grid.downsample != 8 {
            return Err(CoreError::Config(format!(
                "three stride-2 stages downsample by 8, grid says {}",
                self.grid.downsample
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(CoreError::Config("encoder channels must be positive".into()));
        }
        if self.predictor_depth == 0 {
            return Err(CoreError::Config("predictor_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-cell embedding width `E = D·C`.
    pub fn embed_dim(&self) -> usize {
        self.grid.bev_dims().2 * self.encoder_channels[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(rng: &mut impl Rng, cout: usize, cin: usize, spatial: usize) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(KERNEL).take(spatial));
        let fan_in = (cin * KERNEL.pow(spatial as u32)) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            weight: Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound)),
            bias: Tensor::from_fn(&[cout], |_| rng.gen_range(-bound..bound)),
        }
    }
}

/// Three stride-2 conv3d stages.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub empty: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub context: EncoderParams,
    pub target: EncoderParams,
    pub predictor: PredictorParams,
    pub tokens: Tokens,
    pub eta: f64,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64, eta0: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng(Stream::Init, &[seed]);
        let [c1, c2, c3] = config.encoder_channels;
        let context = EncoderParams {
            layers: vec![
                ConvLayer::init(&mut rng, c1, FEATURE_CHANNELS, 3),
                ConvLayer::init(&mut rng, c2, c1, 3),
                ConvLayer::init(&mut rng, c3, c2, 3),
            ],
        };
        let e = config.embed_dim();
        let predictor = PredictorParams {
            layers: (0..config.predictor_depth)
                .map(|_| ConvLayer::init(&mut rng, e, e, 2))
                .collect(),
        };
        let bound = 1.0 / (e as f64).sqrt();
        let tokens = Tokens {
            empty: Tensor::from_fn(&[e], |_| rng.gen_range(-bound..bound)),
            mask: Tensor::from_fn(&[e], |_| rng.gen_range(-bound..bound)),
        };
        Ok(Self {
            target: context.clone(),
            context,
            predictor,
            tokens,
            config,
            eta: eta0,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    /// Names of gradient-trained tensors, in [`Self::trainable`] order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.context.layers.len() {
            names.push(format!("context.{i}.weight"));
            names.push(format!("context.{i}.bias"));
        }
        for i in 0..self.predictor.layers.len() {
            names.push(format!("predictor.{i}.weight"));
            names.push(format!("predictor.{i}.bias"));
        }
        names.push("tokens.empty".into());
        names.push("tokens.mask".into());
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.context.layers.iter().chain(&self.predictor.layers) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.tokens.empty);
        out.push(&self.tokens.mask);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.context.layers.iter_mut().chain(self.predictor.layers.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.tokens.empty);
        out.push(&mut self.tokens.mask);
        out
    }

    pub fn target_names(&self) -> Vec<String> {
        (0..self.target.layers.len())
            .flat_map(|i| [format!("target.{i}.weight"), format!("target.{i}.bias")])
            .collect()
    }

    pub fn target_tensors(&self) -> Vec<&Tensor> {
        self.target.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn target_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.target
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// `θ̄ ← η·θ̄ + (1−η)·θ` over every encoder tensor.
pub fn ema_update(target: &mut EncoderParams, context: &EncoderParams, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(CoreError::Config(format!("EMA coefficient {eta} outside [0, 1]")));
    }
    if target.layers.len() != context.layers.len() {
        return Err(CoreError::Shape("target and context encoders differ in depth".into()));
    }
    for (t, c) in target.layers.iter_mut().zip(&context.layers) {
        for (tt, ct) in [(&mut t.weight, &c.weight), (&mut t.bias, &c.bias)] {
            if tt.shape() != ct.shape() {
                return Err(CoreError::Shape(format!("EMA: {:?} vs {:?}", tt.shape(), ct.shape())));
            }
            for (a, &b) in tt.data_mut().iter_mut().zip(ct.data()) {
                *a = eta * *a + (1.0 - eta) * b;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaSchedule {
    /// `η(t) = η₀ + (1 − η₀)·t/T`.
    Linear,
    Frozen,
}

impl FromStr for EmaSchedule {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "frozen" => Ok(Self::Frozen),
            o => Err(CoreError::Config(format!("ema_schedule: unknown value '{o}'"))),
        }
    }
}

impl fmt::Display for EmaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Frozen => "frozen",
        })
    }
}

pub fn ema_momentum(step: u64, total: u64, eta0: f64, schedule: EmaSchedule) -> f64 {
    match schedule {
        EmaSchedule::Frozen => eta0,
        EmaSchedule::Linear if total == 0 => 1.0,
        EmaSchedule::Linear => {
            let t = step.min(total) as f64 / total as f64;
            (eta0 + (1.0 - eta0) * t).min(1.0)
        }
    }
}
